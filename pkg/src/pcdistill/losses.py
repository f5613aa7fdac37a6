"""Cross-entropy, temperature KD and feature-distance (FAD) losses.

All losses return a 1-element :class:`Tensor` averaged over the batch.
Teacher inputs are detached: gradients only ever reach the student.
"""
from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, as_tensor, reduce, scale

SIMPLEX_TOL = 1e-9


@dataclass(frozen=True)
class LossWeights:
    """Weights of the joint objective; must lie on the probability simplex."""

    alpha: float = 1 / 3
    beta: float = 1 / 3
    gamma: float = 1 / 3

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be nonnegative, got {getattr(self, name)}")
        total = self.alpha + self.beta + self.gamma
        if abs(total - 1.0) > SIMPLEX_TOL:
            raise ValueError(
                f"loss weights must sum to 1 (got {self.alpha}+{self.beta}+{self.gamma}={total!r})"
            )

    def as_tuple(self) -> tuple:
        return (self.alpha, self.beta, self.gamma)


@dataclass(frozen=True)
class KDLossConfig:
    temperature: float = 4.0
    # optional tau^2 rescaling that keeps soft-target gradients comparable across temperatures
    tau_squared: bool = False

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")


class FADVariant(str, enum.Enum):
    MAX = "max"
    MIN = "min"
    MEAN = "mean"


class FADAxis(str, enum.Enum):
    DIMS = "dims"  # reduce over the D feature channels of each point
    POINTS = "points"  # reduce over the N points of each channel


def simplex_grid(steps: int) -> list:
    """All weight triples with coordinates in multiples of ``1/steps``."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    out = []
    for i, j in itertools.product(range(steps + 1), repeat=2):
        k = steps - i - j
        if k >= 0:
            out.append(LossWeights(i / steps, j / steps, k / steps))
    return out


def log_softmax(logits, tau: float = 1.0) -> Tensor:
    logits = as_tensor(logits)
    z = scale(logits, 1.0 / tau) if tau != 1.0 else logits
    # the shift is a constant; log-softmax is shift invariant so no gradient is lost
    shift = Tensor(z.data.max(axis=-1, keepdims=True))
    z = z - shift
    lse = z.exp().sum(axis=-1).log()
    return z - lse.reshape(lse.shape + (1,))


def softmax(logits, tau: float = 1.0) -> Tensor:
    """Row-wise softmax of ``logits / tau`` with max subtraction."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return log_softmax(logits, tau).exp()


def _one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label out of range [0, {n_classes}): {labels.min()}..{labels.max()}")
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def ce_loss(student_logits, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    logits = as_tensor(student_logits)
    onehot = _one_hot(labels, logits.shape[-1])
    if onehot.shape[0] != logits.shape[0]:
        raise ShapeError(f"{onehot.shape[0]} labels for logits of shape {logits.shape}")
    picked = (log_softmax(logits) * Tensor(onehot)).sum(axis=-1)
    return -picked.mean()


def kd_loss(student_logits, teacher_logits, config: KDLossConfig = KDLossConfig()) -> Tensor:
    """Soft-target cross-entropy H(softmax(l_T/tau), softmax(l_S/tau)), batch mean.

    The student gradient is (softmax(l_S/tau) - softmax(l_T/tau)) / tau per sample,
    so it vanishes exactly when the two logit rows agree.
    """
    s = as_tensor(student_logits)
    t = as_tensor(teacher_logits)
    if s.shape != t.shape:
        raise ShapeError(f"kd_loss: student logits {s.shape} vs teacher logits {t.shape}")
    tau = config.temperature
    target = softmax(t.detach(), tau).detach()
    loss = -(log_softmax(s, tau) * target).sum(axis=-1).mean()
    if config.tau_squared:
        loss = scale(loss, tau * tau)
    return loss


def fad_loss(f_teacher, f_student, variant=FADVariant.MEAN, axis=FADAxis.DIMS) -> Tensor:
    """Feature distance between B x N x D teacher and student feature maps.

    MAX / MIN: per sample, sum over points of |max_j f_T - max_j f_S| (resp. min);
    with ``axis="points"`` the statistic is taken over points and summed over channels.
    MEAN: per sample, mean absolute difference over all N*D entries.
    Every variant is then averaged over the batch.
    """
    variant = FADVariant(variant)
    axis = FADAxis(axis)
    ft = as_tensor(f_teacher).detach()
    fs = as_tensor(f_student)
    if ft.shape != fs.shape:
        raise ShapeError(f"fad_loss: teacher features {ft.shape} vs student features {fs.shape}")
    if fs.ndim != 3:
        raise ShapeError(f"fad_loss expects B x N x D feature maps, got {fs.shape}")
    # point-axis sums are correctly rounded so reordering points cannot change the loss
    if variant is FADVariant.MEAN:
        return reduce((ft - fs).abs().mean(axis=2), 1, "mean", exact=True).mean()
    red = 2 if axis is FADAxis.DIMS else 1
    stat_t = ft.max(red) if variant is FADVariant.MAX else ft.min(red)
    stat_s = fs.max(red) if variant is FADVariant.MAX else fs.min(red)
    return reduce((stat_t - stat_s).abs(), 1, "sum", exact=True).mean()


def joint_loss(l_fad, l_kd, l_ce, weights: LossWeights) -> Tensor:
    """alpha * L_FAD + beta * L_KD + gamma * L_CE."""
    return (
        scale(as_tensor(l_fad), weights.alpha)
        + scale(as_tensor(l_kd), weights.beta)
        + scale(as_tensor(l_ce), weights.gamma)
    )
