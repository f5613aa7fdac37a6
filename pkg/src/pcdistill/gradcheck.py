"""Central finite-difference gradient checks."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, backward


def numerical_grad(fn: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """d fn / d arr by central differences, perturbing ``arr`` in place."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = fn()
        flat[i] = old - h
        down = fn()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|, floor).

    The floor keeps entries whose true gradient is ~0 from turning
    finite-difference round-off (~1e-11) into a large relative error.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(loss_fn: Callable[[Sequence[Tensor]], Tensor], inputs: Sequence[Tensor],
                    h: float = 1e-5) -> float:
    """Max relative error between backward() and central differences over all inputs."""
    for t in inputs:
        t.grad = None
    loss = loss_fn(inputs)
    backward(loss)
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numerical_grad(lambda: loss_fn(inputs).item(), t.data, h)
        worst = max(worst, rel_error(analytic, numeric))
    return worst
