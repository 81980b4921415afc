"""Hypersphere primitives: unit vectors, surface areas, seeded RNG streams,
Householder reflections and a Gauss-Legendre oracle for radial densities."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

ALGORITHM_ID = "numpy-PCG64"
UNIT_TOL = 1e-9


class DomainError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


class UnitVector:
    """A point on S^{d-1}.  The constructor normalizes its input."""

    __slots__ = ("coords",)

    def __init__(self, coords, normalize: bool = True):
        x = np.array(coords, dtype=np.float64).reshape(-1)
        if x.size < 2:
            raise DomainError(f"unit vectors need d >= 2, got d={x.size}")
        n = float(np.linalg.norm(x))
        if not np.isfinite(n) or n == 0.0:
            raise DomainError("cannot normalize a zero or non-finite vector")
        if normalize:
            x = x / n
        elif abs(n - 1.0) > UNIT_TOL:
            raise DomainError(f"vector norm {n!r} is not 1")
        x.setflags(write=False)
        self.coords = x

    @property
    def dim(self) -> int:
        return self.coords.size

    def __array__(self, dtype=None, copy=None):
        return self.coords if dtype is None else self.coords.astype(dtype)

    def __repr__(self):
        return f"UnitVector({self.coords.tolist()})"

    @classmethod
    def basis(cls, d: int, i: int = 0) -> "UnitVector":
        e = np.zeros(d)
        e[i] = 1.0
        return cls(e, normalize=False)


@dataclass
class SeededRng:
    """A reproducible random stream; ``split`` derives independent child streams."""

    seed: int
    stream: tuple[int, ...] = ()
    algorithm: str = ALGORITHM_ID
    generator: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.algorithm != ALGORITHM_ID:
            raise DomainError(f"unsupported rng algorithm {self.algorithm!r}")
        ss = np.random.SeedSequence([int(self.seed) & (2**64 - 1), *self.stream])
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def split(self, *stream_id: int) -> "SeededRng":
        return SeededRng(self.seed, self.stream + tuple(int(s) for s in stream_id))


def as_rng(rng) -> np.random.Generator:
    if isinstance(rng, SeededRng):
        return rng.generator
    if isinstance(rng, np.random.Generator):
        return rng
    return SeededRng(int(rng)).generator


def log_surface_area(d: int) -> float:
    if d < 2:
        raise DomainError(f"surface area needs d >= 2, got {d}")
    if d <= 200:
        # A_2 = 2 pi, A_3 = 4 pi, A_{k+2} = 2 pi A_k / k; one rounding per step
        area = 2.0 * math.pi if d % 2 == 0 else 4.0 * math.pi
        for k in range(2 + d % 2, d, 2):
            area *= 2.0 * math.pi / k
        return math.log(area)
    return math.log(2.0) + 0.5 * d * math.log(math.pi) - math.lgamma(0.5 * d)


def surface_area(d: int) -> float:
    """Area of the unit sphere S^{d-1} embedded in R^d."""
    return math.exp(log_surface_area(d))


def sample_uniform_sphere(d: int, rng, size: int | None = None) -> np.ndarray:
    """Uniform direction(s) on S^{d-1} by normalizing standard Gaussians.

    ``d == 1`` returns +-1 with equal probability (the 0-sphere).
    """
    if d < 1:
        raise DomainError(f"dimension must be >= 1, got {d}")
    gen = as_rng(rng)
    shape = (d,) if size is None else (size, d)
    if d == 1:
        return np.where(gen.random(shape) < 0.5, -1.0, 1.0)
    x = gen.standard_normal(shape)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    # a zero draw has probability zero; redraw would break stream layout
    return x / np.where(n == 0.0, 1.0, n)


def householder_reflect(y, target) -> np.ndarray:
    """Apply the reflection taking e1 onto ``target`` to the rows of ``y``.

    Works for a single vector or a batch of rows.  When target is e1 the
    reflection is undefined and y is returned unchanged.
    """
    y = np.asarray(y, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if y.shape[-1] != target.shape[-1]:
        raise DomainError(f"dimension mismatch: {y.shape[-1]} vs {target.shape[-1]}")
    u = -target.copy()
    u[..., 0] += 1.0
    norm = np.linalg.norm(u, axis=-1, keepdims=True)
    degenerate = norm < 1e-15
    u = u / np.where(degenerate, 1.0, norm)
    out = y - 2.0 * np.sum(u * y, axis=-1, keepdims=True) * u
    return np.where(degenerate, y, out)


@dataclass(frozen=True)
class QuadratureRule:
    nodes: np.ndarray
    weights: np.ndarray

    @classmethod
    def gauss_legendre(cls, n: int) -> "QuadratureRule":
        x, w = np.polynomial.legendre.leggauss(n)
        return cls(x, w)

    @property
    def size(self) -> int:
        return self.nodes.size

    def integrate(self, f: Callable, a: float = -1.0, b: float = 1.0) -> float:
        half = 0.5 * (b - a)
        x = half * self.nodes + 0.5 * (a + b)
        return half * float(np.dot(self.weights, f(x)))


DEFAULT_NODES = 128
MAX_NODES = 2**15


def _log_radial_integral(log_f, d, n):
    # t = cos(theta) removes the (1 - t^2)^{(d-3)/2} endpoint singularity
    rule = QuadratureRule.gauss_legendre(n)
    theta = 0.5 * np.pi * (rule.nodes + 1.0)
    t = np.cos(theta)
    with np.errstate(divide="ignore"):
        logs = log_f(t) + (d - 2) * np.log(np.sin(theta))
    logs = np.asarray(logs, dtype=np.float64)
    bad = ~np.isfinite(logs) & ~np.isneginf(logs)
    if bad.any():
        i = int(np.argmax(bad))
        raise NumericalError(f"non-finite integrand at node t={t[i]!r}")
    if np.isneginf(logs).all():
        return -np.inf
    m = logs.max()
    s = np.dot(rule.weights, np.exp(logs - m)) * 0.5 * np.pi
    return m + math.log(s)


def log_integrate_radial_density(
    log_f: Callable[[np.ndarray], np.ndarray],
    d: int,
    n: int = DEFAULT_NODES,
    tol: float = 1e-10,
) -> float:
    """Log of the sphere integral of exp(log_f(mu^T x)) over S^{d-1}.

    The node count is doubled until successive estimates agree to ``tol``.
    """
    if d < 2:
        raise DomainError(f"d must be >= 2, got {d}")
    prev = _log_radial_integral(log_f, d, n)
    while n < MAX_NODES:
        n *= 2
        cur = _log_radial_integral(log_f, d, n)
        if abs(cur - prev) <= tol:
            return log_surface_area(d - 1) + cur if d > 2 else math.log(2.0) + cur
        prev = cur
    raise NumericalError(f"quadrature did not converge with {MAX_NODES} nodes")


def integrate_radial_density(
    f: Callable[[np.ndarray], np.ndarray],
    d: int,
    rule: QuadratureRule | None = None,
    tol: float = 1e-10,
) -> float:
    """Integral over S^{d-1} of a density depending on x only through t = mu^T x.

    Equals A_{d-1} * int_{-1}^{1} f(t) (1 - t^2)^{(d-3)/2} dt where A_{d-1} is
    the area of S^{d-2} (2 for d = 2, the two points of the 0-sphere).
    """

    def log_f(t):
        v = np.asarray(f(t), dtype=np.float64)
        if not np.all(np.isfinite(v)):
            i = int(np.argmax(~np.isfinite(v)))
            raise NumericalError(f"non-finite integrand at node t={np.asarray(t)[i]!r}")
        if np.any(v < 0):
            raise NumericalError("integrand must be non-negative")
        with np.errstate(divide="ignore"):
            return np.log(v)

    n = DEFAULT_NODES if rule is None else rule.size
    return math.exp(log_integrate_radial_density(log_f, d, n=n, tol=tol))
