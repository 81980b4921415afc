"""Power Spherical and von Mises-Fisher distributions on S^{d-1}.

Both have densities that depend on z only through t = mu^T z:

    PS(z; mu, kappa)  = C_ps(kappa) * (1 + t)^kappa
    vMF(z; mu, kappa) = C_vmf(kappa) * exp(kappa * t)

The PS normalizer has a closed form in log-gamma functions; the vMF one
(a modified Bessel function) is only available here as a quadrature oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .sphere import (
    DomainError,
    UnitVector,
    as_rng,
    householder_reflect,
    log_integrate_radial_density,
    log_surface_area,
    sample_uniform_sphere,
)

KAPPA_MAX = 1e5
ANTIPODAL_EPS = 1e-12


def _check_kappa(kappa: float) -> float:
    kappa = float(kappa)
    if not math.isfinite(kappa) or kappa < 0:
        raise DomainError(f"kappa must be finite and >= 0, got {kappa!r}")
    return kappa


@dataclass(frozen=True)
class SphericalParams:
    mu: UnitVector
    kappa: float

    def __post_init__(self):
        if not isinstance(self.mu, UnitVector):
            object.__setattr__(self, "mu", UnitVector(self.mu))
        object.__setattr__(self, "kappa", _check_kappa(self.kappa))

    @property
    def dim(self) -> int:
        return self.mu.dim


def ps_alpha_beta(d: int, kappa):
    beta = 0.5 * (d - 1)
    return beta + kappa, beta


def ps_log_normalizer(d: int, kappa: float) -> float:
    """log C(kappa) for the Power Spherical density on S^{d-1}."""
    if d < 2:
        raise DomainError(f"d must be >= 2, got {d}")
    kappa = _check_kappa(kappa)
    if kappa > 1e7:
        raise DomainError(f"kappa={kappa:g} is outside the supported range")
    if kappa == 0.0:
        # uniform density; same value as the general formula up to rounding
        return -log_surface_area(d)
    a, b = ps_alpha_beta(d, kappa)
    return -((a + b) * math.log(2.0) + b * math.log(math.pi) + math.lgamma(a) - math.lgamma(a + b))


def clamped_log1p_cos(t):
    """log(1 + t) with 1 + t floored at ANTIPODAL_EPS."""
    return np.log(np.maximum(1.0 + np.asarray(t, dtype=np.float64), ANTIPODAL_EPS))


class PowerSpherical:
    def __init__(self, mu, kappa: float):
        self.params = SphericalParams(mu, kappa)
        self.dim = self.params.dim
        self.alpha, self.beta = ps_alpha_beta(self.dim, self.params.kappa)
        self.log_normalizer = ps_log_normalizer(self.dim, self.params.kappa)

    @property
    def mu(self) -> np.ndarray:
        return self.params.mu.coords

    @property
    def kappa(self) -> float:
        return self.params.kappa

    def log_prob(self, z) -> np.ndarray | float:
        """Log density at z (one vector or rows of a matrix)."""
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.dim:
            raise DomainError(f"expected dimension {self.dim}, got {z.shape[-1]}")
        t = z @ self.mu
        out = self.log_normalizer + self.kappa * clamped_log1p_cos(t)
        return float(out) if out.ndim == 0 else out

    def marginal_t_log_density(self, t):
        """Log density of t = mu^T x for x drawn from this distribution."""
        t = np.asarray(t, dtype=np.float64)
        if np.any(np.abs(t) > 1.0):
            raise DomainError("t must lie in [-1, 1]")
        d = self.dim
        log_area = log_surface_area(d - 1) if d > 2 else math.log(2.0)
        one_minus_sq = np.maximum(1.0 - t * t, ANTIPODAL_EPS)
        out = (
            self.log_normalizer
            + self.kappa * clamped_log1p_cos(t)
            + 0.5 * (d - 3) * np.log(one_minus_sq)
            + log_area
        )
        return float(out) if out.ndim == 0 else out

    def mean_cosine(self) -> float:
        """E[mu^T x] = (alpha - beta) / (alpha + beta)."""
        return (self.alpha - self.beta) / (self.alpha + self.beta)

    def sample(self, rng, size: int | None = None) -> np.ndarray:
        """Draw samples by the Beta / tangent-direction / Householder construction."""
        gen = as_rng(rng)
        n = 1 if size is None else size
        # Beta(alpha, beta) as a ratio of two Gammas
        ga = gen.standard_gamma(self.alpha, n)
        gb = gen.standard_gamma(self.beta, n)
        t = 2.0 * ga / (ga + gb) - 1.0
        v = sample_uniform_sphere(self.dim - 1, gen, size=n)
        if v.ndim == 1:
            v = v[:, None]
        y = np.concatenate([t[:, None], np.sqrt(np.clip(1.0 - t * t, 0.0, None))[:, None] * v], axis=1)
        x = householder_reflect(y, self.mu)
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        return x[0] if size is None else x


class VonMisesFisher:
    def __init__(self, mu, kappa: float):
        self.params = SphericalParams(mu, kappa)
        self.dim = self.params.dim

    @property
    def mu(self) -> np.ndarray:
        return self.params.mu.coords

    @property
    def kappa(self) -> float:
        return self.params.kappa

    def log_prob_unnormalized(self, z):
        """kappa * mu^T z; the normalizer is a constant when kappa is fixed."""
        z = np.asarray(z, dtype=np.float64)
        out = self.kappa * (z @ self.mu)
        return float(out) if np.ndim(out) == 0 else out


def vmf_log_normalizer_oracle(d: int, kappa: float) -> float:
    """-log of the sphere integral of exp(kappa t), by quadrature."""
    kappa = _check_kappa(kappa)
    return -log_integrate_radial_density(lambda t: kappa * t, d)


def ps_log_normalizer_oracle(d: int, kappa: float) -> float:
    """-log of the sphere integral of (1 + t)^kappa, by quadrature."""
    kappa = _check_kappa(kappa)
    return -log_integrate_radial_density(lambda t: kappa * clamped_log1p_cos(t), d)


# functional aliases
def ps_log_prob(dist: PowerSpherical, z):
    return dist.log_prob(z)


def ps_sample(dist: PowerSpherical, rng, size: int | None = None):
    return dist.sample(rng, size)


def ps_marginal_t_log_density(dist: PowerSpherical, t):
    return dist.marginal_t_log_density(t)


def vmf_log_prob_unnormalized(dist: VonMisesFisher, z):
    return dist.log_prob_unnormalized(z)
