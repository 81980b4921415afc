"""A small reverse-mode autodiff engine over float64 numpy arrays.

Every op that touches a grad-requiring input creates a node holding its
parents and a vector-Jacobian closure.  Nodes carry a monotonically
increasing creation id; ``backward`` walks the reachable graph in exact
reverse creation order, which is a valid reverse topological order.

``detach`` returns a value-identical tensor with no history, the
stop-gradient used on the target branch.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import special

_ids = itertools.count()


class ShapeError(ValueError):
    def __init__(self, op: str, *shapes):
        shown = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {shown}")
        self.op = op
        self.shapes = shapes


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_vjp", "_id", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None
        self._id = next(_ids)
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def detach(self):
        return detach(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def detach(t: Tensor) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = t.data
    out.requires_grad = False
    out.grad = None
    out.name = None
    out._parents = ()
    out._vjp = None
    out._id = next(_ids)
    out.op = "detach"
    return out


# elementwise binary ops; the second operand may be a scalar constant or a
# row vector broadcast over the rows of a matrix (bias addition)


def _binary_shapes(op, a: Tensor, b: Tensor):
    if a.shape == b.shape or b.ndim == 0 or a.ndim == 0:
        return
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return
    if b.ndim == 2 and a.ndim == 1 and b.shape[1] == a.shape[0]:
        return
    raise ShapeError(op, a.shape, b.shape)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    return g.sum(axis=0)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("add", a, b)
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("sub", a, b)
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("mul", a, b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# unary ops


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("log: non-positive input")
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _node(y, (x,), lambda g: (g * y,), "exp")


def softplus(x: Tensor) -> Tensor:
    y = np.logaddexp(0.0, x.data)
    return _node(y, (x,), lambda g: (g * special.expit(x.data),), "softplus")


def lgamma(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("lgamma: defined here for positive inputs only")
    return _node(special.gammaln(x.data), (x,), lambda g: (g * special.digamma(x.data),), "lgamma")


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to [lo, hi]; the gradient is zero where clipping is active."""
    d = x.data
    y = np.clip(d, lo, hi)
    inside = np.ones(d.shape, dtype=bool)
    if lo is not None:
        inside &= d >= lo
    if hi is not None:
        inside &= d <= hi
    return _node(y, (x,), lambda g: (g * inside,), "clamp")


def clamp_min(x: Tensor, lo: float) -> Tensor:
    return clamp(x, lo, None)


# reductions and structure


def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        return _node(x.data.sum(), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")
    y = x.data.sum(axis=axis)
    return _node(y, (x,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),), "sum")


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis), 1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in tensors)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _node(y, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def slice_(x: Tensor, idx) -> Tensor:
    y = x.data[idx]

    def vjp(g):
        full = np.zeros(x.shape)
        np.add.at(full, idx, g)
        return (full,)

    return _node(np.array(y), (x,), vjp, "slice")


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize each row of a matrix (or a single vector) to unit length."""
    d = x.data
    norm = np.sqrt(np.sum(d * d, axis=-1, keepdims=True))
    norm = np.maximum(norm, eps)
    y = d / norm

    def vjp(g):
        return ((g - y * np.sum(g * y, axis=-1, keepdims=True)) / norm,)

    return _node(y, (x,), vjp, "l2_normalize")


@dataclass
class BatchStats:
    """Running per-feature mean and variance for eval-mode standardization."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.9

    @classmethod
    def init(cls, width: int, momentum: float = 0.9) -> "BatchStats":
        return cls(np.zeros(width), np.ones(width), momentum)


def batch_standardize(
    x: Tensor,
    stats: BatchStats | None = None,
    training: bool = True,
    eps: float = 1e-5,
) -> Tensor:
    """Per-feature standardization over the batch (no affine parameters).

    Training mode uses batch statistics, differentiates through them and
    updates ``stats`` in place; eval mode uses the running statistics.
    """
    if x.ndim != 2:
        raise ShapeError("batch_standardize", x.shape)
    d = x.data
    if not training:
        if stats is None:
            raise ValueError("batch_standardize: eval mode needs running statistics")
        inv = 1.0 / np.sqrt(stats.var + eps)
        return _node((d - stats.mean) * inv, (x,), lambda g: (g * inv,), "batch_standardize")
    n = d.shape[0]
    if n < 2:
        raise ShapeError("batch_standardize", x.shape)
    m = d.mean(axis=0)
    v = d.var(axis=0)
    inv = 1.0 / np.sqrt(v + eps)
    y = (d - m) * inv
    if stats is not None:
        k = stats.momentum
        stats.mean = k * stats.mean + (1 - k) * m
        stats.var = k * stats.var + (1 - k) * v * n / (n - 1)

    def vjp(g):
        return (inv * (g - g.mean(axis=0) - y * (g * y).mean(axis=0)),)

    return _node(y, (x,), vjp, "batch_standardize")


# backward pass


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode gradients of a scalar ``loss`` for every grad-requiring leaf.

    Leaf gradients are stored in ``leaf.grad`` and returned as a mapping.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        stack.extend(p for p in t._parents if p.requires_grad)
    grads: dict[int, np.ndarray] = {loss._id: np.ones(loss.shape)}
    leaves: dict[Tensor, np.ndarray] = {}
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            g = np.zeros(t.shape)
        if t._vjp is None:
            leaves[t] = g
            t.grad = g
            continue
        for p, gp in zip(t._parents, t._vjp(g)):
            if not p.requires_grad:
                continue
            gp = np.asarray(gp, dtype=np.float64).reshape(p.shape)
            if p._id in grads:
                grads[p._id] = grads[p._id] + gp
            else:
                grads[p._id] = gp
    return leaves


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    failures: list[tuple[int, tuple[int, ...], float, float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def __str__(self):
        status = "PASS" if self.passed else f"FAIL ({len(self.failures)} coords)"
        return f"grad_check {status}: max rel err {self.max_rel_error:.3e} (tol {self.tolerance:g})"


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    step: float = 1e-5,
    tolerance: float = 1e-6,
    floor: float = 1e-6,
    analytic: Sequence[np.ndarray] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f(*tensors)`` against central differences.

    The relative error per coordinate is |a - n| / max(|a|, |n|, floor).
    ``analytic`` overrides the autodiff gradients (used for negative controls).
    """
    points = [np.array(x, dtype=np.float64) for x in inputs]
    if analytic is None:
        ts = [Tensor(p, requires_grad=True) for p in points]
        backward(f(*ts))
        analytic = [t.grad if t.grad is not None else np.zeros(t.shape) for t in ts]

    def value(xs):
        return f(*[Tensor(x) for x in xs]).item()

    report = GradCheckReport(0.0, tolerance)
    for k, p in enumerate(points):
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + step
            up = value(points)
            p[idx] = orig - step
            down = value(points)
            p[idx] = orig
            num = (up - down) / (2 * step)
            ana = float(analytic[k][idx])
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            report.max_rel_error = max(report.max_rel_error, err)
            if err > tolerance:
                report.failures.append((k, idx, ana, num))
    return report
