"""Dense float64 tensors with a reverse-mode gradient tape.

Every operation that involves a ``requires_grad`` input records a :class:`Node`
on its output.  :func:`backward` rebuilds the tape for one loss by walking the
nodes in topological order and applies the chain rule once per node.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class DomainError(ValueError):
    """Raised when an input lies outside an operation's domain (e.g. log of 0)."""


class Node:
    """One recorded operation: its inputs and the rule mapping output grad to input grads."""

    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn

    def __repr__(self) -> str:
        return f"Node({self.op})"


class Tensor:
    """An n-dimensional float64 array that can take part in gradient tapes."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, node: Optional[Node] = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node = node

    # -- basic properties -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """Constant copy sharing no tape history (used for teacher outputs)."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def abs(self):
        return unary(self, "abs")

    def exp(self):
        return unary(self, "exp")

    def log(self):
        return unary(self, "log")

    def relu(self):
        return unary(self, "relu")

    def max(self, axis: int):
        return reduce(self, axis, "max")

    def min(self, axis: int):
        return reduce(self, axis, "min")

    def mean(self, axis: Optional[int] = None):
        return reduce(self, axis, "mean")

    def sum(self, axis: Optional[int] = None):
        return reduce(self, axis, "sum")

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(arr: np.ndarray) -> Tensor:
    """Wrap a float64 array without copying; the caller must not mutate it afterwards."""
    out = Tensor.__new__(Tensor)
    out.data = arr if arr.ndim else arr.reshape(1)
    out.requires_grad = False
    out.grad = None
    out.node = None
    return out


def _result(data: np.ndarray, op: str, inputs: tuple, backward_fn: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs
    out.grad = None
    out.node = Node(op, inputs, backward_fn) if needs else None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (the inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- binary elementwise ----------------------------------------------------

def _broadcast_shape(a: Tensor, b: Tensor, kind: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def elementwise(a: ArrayLike, b: ArrayLike, kind: str) -> Tensor:
    """Broadcasting binary op, ``kind`` in {add, sub, mul}."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, kind)
    if kind == "add":
        data = a.data + b.data

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    elif kind == "sub":
        data = a.data - b.data

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    elif kind == "mul":
        data = a.data * b.data

        def bw(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    else:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return _result(data, kind, (a, b), bw)


def add(a, b):
    return elementwise(a, b, "add")


def sub(a, b):
    return elementwise(a, b, "sub")


def mul(a, b):
    return elementwise(a, b, "mul")


# -- unary -----------------------------------------------------------------

def unary(t: ArrayLike, kind: str, c: float = 1.0) -> Tensor:
    """Elementwise op, ``kind`` in {abs, exp, log, relu, neg, scale}.

    ``abs`` uses sign(0) = 0 for its subgradient; ``scale`` multiplies by ``c``.
    """
    t = as_tensor(t)
    x = t.data
    if kind == "abs":
        data = np.abs(x)
        s = np.sign(x)

        def bw(g):
            return (g * s,)

    elif kind == "exp":
        data = np.exp(x)

        def bw(g):
            return (g * data,)

    elif kind == "log":
        if np.any(x <= 0):
            raise DomainError(f"log of non-positive value (min {x.min()!r})")
        data = np.log(x)

        def bw(g):
            return (g / x,)

    elif kind == "relu":
        data = np.maximum(x, 0.0)

        def bw(g):
            return (g * (x > 0),)

    elif kind == "neg":
        data = -x

        def bw(g):
            return (-g,)

    elif kind == "scale":
        c = float(c)
        data = x * c

        def bw(g):
            return (g * c,)

    else:
        raise ValueError(f"unknown unary kind {kind!r}")
    return _result(data, kind, (t,), bw)


def neg(t):
    return unary(t, "neg")


def scale(t, c: float):
    return unary(t, "scale", c)


def relu(t):
    return unary(t, "relu")


# -- matmul ----------------------------------------------------------------

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """``a[..., m, k] @ b[k, n]``, broadcast over the leading extents of ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    k, n = b.shape
    lead = a.shape[:-1]
    # one GEMM over the flattened leading extents
    data = (a.data.reshape(-1, k) @ b.data).reshape(lead + (n,))

    def bw(g):
        g2 = g.reshape(-1, n)
        ga = (g2 @ b.data.T).reshape(a.shape)
        gb = a.data.reshape(-1, k).T @ g2
        return ga, gb

    return _result(data, "matmul", (a, b), bw)


# -- reductions ------------------------------------------------------------

def reduce(t: ArrayLike, axis: Optional[int], kind: str, exact: bool = False) -> Tensor:
    """Reduce over ``axis`` with ``kind`` in {max, min, mean, sum}.

    ``axis=None`` (sum and mean only) reduces every element to a 1-element tensor.
    Max/min route the whole incoming gradient to the first extremal element
    along the axis, so ties resolve to the lowest index.  ``exact=True`` makes
    sum/mean correctly rounded (``math.fsum``), hence independent of element order.
    """
    t = as_tensor(t)
    if axis is None:
        if kind not in ("sum", "mean"):
            raise ValueError(f"{kind} needs an explicit axis")
        n = t.size
        total = t.data.sum()
        data = np.array([total / n if kind == "mean" else total])
        factor = 1.0 / n if kind == "mean" else 1.0

        def bw(g):
            return (np.full(t.shape, g.reshape(-1)[0] * factor),)

        return _result(data, kind, (t,), bw)

    if not -t.ndim <= axis < t.ndim:
        raise IndexError(f"reduce axis {axis} out of range for rank {t.ndim}")
    axis = axis % t.ndim
    x = t.data
    if kind in ("max", "min"):
        idx = np.argmax(x, axis=axis) if kind == "max" else np.argmin(x, axis=axis)
        idx = np.expand_dims(idx, axis)
        data = np.take_along_axis(x, idx, axis=axis).squeeze(axis)

        def bw(g):
            out = np.zeros_like(x)
            np.put_along_axis(out, idx, np.expand_dims(g, axis), axis=axis)
            return (out,)

    elif kind in ("sum", "mean"):
        extent = x.shape[axis]
        if exact:
            moved = np.moveaxis(x, axis, -1)
            data = np.array([math.fsum(r) for r in moved.reshape(-1, extent)]).reshape(moved.shape[:-1])
        else:
            data = x.sum(axis=axis)
        factor = 1.0
        if kind == "mean":
            data = data / extent
            factor = 1.0 / extent

        def bw(g):
            return (np.broadcast_to(np.expand_dims(g * factor, axis), x.shape),)

    else:
        raise ValueError(f"unknown reduction {kind!r}")
    if data.ndim == 0:
        data = data.reshape(1)
    return _result(data, kind, (t,), bw)


def reshape(t: ArrayLike, shape: Sequence[int]) -> Tensor:
    t = as_tensor(t)
    old = t.shape
    data = t.data.reshape(tuple(shape))

    def bw(g):
        return (g.reshape(old),)

    return _result(data, "reshape", (t,), bw)


# -- tape and backward -----------------------------------------------------

class Tape:
    """Operations reachable from one output, in topological (forward) order."""

    def __init__(self, nodes: list):
        self.nodes = nodes  # list of output tensors carrying a Node

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
        order: list = []
        seen: set = set()
        stack = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen or t.node is None:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for inp in t.node.inputs:
                if inp.node is not None and id(inp) not in seen:
                    stack.append((inp, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Populate ``.grad`` of every ``requires_grad`` tensor reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` arrays, so call
    :func:`zero_grad` on parameters between steps.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if tape is None:
        tape = Tape.record(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for out in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        _accumulate(out, g)
        for inp, gi in zip(out.node.inputs, out.node.backward_fn(g)):
            if not inp.requires_grad:
                continue
            key = id(inp)
            if inp.node is None:
                _accumulate(inp, gi)
            elif key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64).reshape(t.shape)
    if t.grad is None:
        t.grad = np.array(g, copy=True)
    else:
        t.grad += g


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
