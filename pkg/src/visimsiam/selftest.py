"""Oracle checks run by ``visimsiam selftest``: normalizers against
quadrature, autodiff against central differences, the loss equivalence,
and Welch p-values against direct integration of the t density."""

from __future__ import annotations

import math

import numpy as np
from scipy import integrate

from . import autodiff as ad
from .analysis import welch_t_test
from .autodiff import Tensor, grad_check
from .distributions import ps_log_normalizer, ps_log_normalizer_oracle
from .losses import ViewEmbeddings, simsiam_loss, vi_simsiam_loss, vmf_constant_kappa_loss
from .model import ModelConfig, encode, init_parameters
from .sphere import log_surface_area

NORMALIZER_DIMS = (2, 3, 5, 16)
NORMALIZER_KAPPAS = (0.0, 0.5, 1.0, 10.0, 100.0, 1000.0)


def normalizer_errors() -> list[tuple[int, float, float]]:
    """(d, kappa, |exp(closed - quadrature) - 1|) over the check grid."""
    out = []
    for d in NORMALIZER_DIMS:
        for k in NORMALIZER_KAPPAS:
            diff = ps_log_normalizer(d, k) - ps_log_normalizer_oracle(d, k)
            out.append((d, k, abs(math.expm1(diff))))
    return out


def t_two_sided_p(t: float, dof: float) -> float:
    """1 - 2 * integral_0^|t| of the Student-t density, by adaptive quadrature."""
    logc = math.lgamma(0.5 * (dof + 1)) - math.lgamma(0.5 * dof) - 0.5 * math.log(dof * math.pi)

    def density(x):
        return math.exp(logc - 0.5 * (dof + 1) * math.log1p(x * x / dof))

    # the mass in [0, |t|] is computed in pieces so the peak is never skipped
    edges = np.linspace(0.0, abs(t), 9) if abs(t) > 0 else [0.0]
    mass = sum(integrate.quad(density, a, b, epsabs=1e-14, epsrel=1e-13, limit=200)[0] for a, b in zip(edges[:-1], edges[1:]))
    return max(0.0, 1.0 - 2.0 * mass)


def welch_cases(n: int = 50, seed: int = 0):
    gen = np.random.default_rng(seed)
    for _ in range(n):
        na, nb = gen.integers(2, 40, size=2)
        a = gen.normal(gen.normal(0, 1), gen.uniform(0.2, 3.0), na)
        b = gen.normal(gen.normal(0, 1), gen.uniform(0.2, 3.0), nb)
        yield a, b


def _proj_scalar(y: Tensor, gen) -> Tensor:
    return ad.sum_(ad.mul(y, Tensor(gen.standard_normal(y.shape))))


def _op_cases():
    def shift(x, points, gap=0.05):
        for p in points:
            close = np.abs(x - p) < gap
            x = np.where(close, p + np.sign(x - p + 1e-300) * 2 * gap, x)
        return x

    return {
        "relu": (ad.relu, lambda x: shift(x, [0.0])),
        "log": (ad.log, lambda x: np.abs(x) + 0.5),
        "exp": (ad.exp, lambda x: x),
        "softplus": (ad.softplus, lambda x: x),
        "lgamma": (ad.lgamma, lambda x: np.abs(x) + 0.5),
        "l2_normalize": (ad.l2_normalize, lambda x: x),
        "clamp": (lambda t: ad.clamp(t, -1.0, 1.0), lambda x: shift(x, [-1.0, 1.0])),
        "sum": (lambda t: ad.sum_(t, axis=1), lambda x: x),
        "mean": (ad.mean, lambda x: x),
        "batch_standardize": (ad.batch_standardize, lambda x: x),
        "matmul": (lambda t: ad.matmul(t, Tensor(np.linspace(-1, 1, 6).reshape(3, 2))), lambda x: x),
    }


def op_grad_errors(seeds) -> dict[str, float]:
    worst = {}
    for name, (op, prep) in _op_cases().items():
        for seed in seeds:
            x = prep(np.random.default_rng(seed).uniform(-2, 2, (4, 3)))
            rep = grad_check(lambda t: _proj_scalar(op(t), np.random.default_rng(100 + seed)), [x])
            worst[name] = max(worst.get(name, 0.0), rep.max_rel_error)
    return worst


def loss_grad_error(seed: int, num_views: int = 3, n: int = 4, d: int = 5) -> float:
    """VI loss gradient w.r.t. unnormalized mu, pre-softplus kappa and targets."""
    gen = np.random.default_rng(seed)
    mus = [gen.standard_normal((n, d)) for _ in range(num_views)]
    ks = [gen.uniform(0.5, 3.0, n) for _ in range(num_views)]
    zs = [gen.standard_normal((n, d)) for _ in range(num_views)]

    def f(*ts):
        m = num_views
        e = ViewEmbeddings(
            [ad.l2_normalize(t) for t in ts[2 * m :]],
            [ad.l2_normalize(t) for t in ts[:m]],
            [ad.softplus(t) for t in ts[m : 2 * m]],
        )
        return vi_simsiam_loss(e, stop_gradient=False).total

    return grad_check(f, mus + ks + zs, tolerance=1e-4).max_rel_error


def network_grad_error(seed: int) -> float:
    """Gradient of the training loss w.r.t. every parameter of a small network.

    Target latents are frozen at their forward values, which makes the
    stop-gradient objective an ordinary function of the parameters.
    """
    from .train import TrainConfig, compute_loss

    cfg = TrainConfig(
        model=ModelConfig(input_dim=6, hidden_dims=(5,), latent_dim=4, predictor_hidden=4),
        num_views=3,
        pairing="all",
    )
    store = init_parameters(cfg.model, seed)
    gen = np.random.default_rng(seed)
    # a zero output bias makes rows with all-dead hidden units normalize a zero vector
    store.params["pred.out.b"].data[:] = gen.normal(0.0, 0.5, cfg.model.latent_dim)
    views = [gen.standard_normal((5, 6)) for _ in range(cfg.num_views)]
    targets = [encode(store.copy(), v, training=True).data for v in views]
    names = list(store.params)
    base = store.copy()

    def f(*ts):
        s = base.copy()
        for k, t in zip(names, ts):
            s.params[k] = t
        return compute_loss(s, cfg, views, targets=targets).total

    # exact zeros (biases feeding batch standardization) meet ~1e-9 rounding noise
    rep = grad_check(f, [base[k].data.copy() for k in names], step=1e-5, tolerance=1e-4, floor=1e-4)
    return rep.max_rel_error


def equivalence_exact(seed: int) -> bool:
    gen = np.random.default_rng(seed)
    z = [ad.l2_normalize(Tensor(gen.standard_normal((6, 5)))) for _ in range(2)]
    mu = [ad.l2_normalize(Tensor(gen.standard_normal((6, 5)))) for _ in range(2)]
    e = ViewEmbeddings(z, mu)
    a = simsiam_loss(e).total.data
    b = vmf_constant_kappa_loss(e, 1.0).total.data
    return bool(np.array_equal(a, b))


def run_selftest(seeds=(0, 1, 2)) -> list[tuple[str, bool, str]]:
    rows = []
    errs = normalizer_errors()
    worst = max(e for *_, e in errs)
    rows.append(("ps-normalizer-vs-quadrature", worst < 1e-8, f"max rel err {worst:.2e}"))
    exact = all(ps_log_normalizer(d, 0.0) == -log_surface_area(d) for d in NORMALIZER_DIMS)
    rows.append(("ps-normalizer-kappa0-uniform", exact, "exact equality with -log area"))
    for name, e in sorted(op_grad_errors(seeds).items()):
        rows.append((f"grad-{name}", e < 1e-6, f"max rel err {e:.2e}"))
    e = max(loss_grad_error(s) for s in seeds)
    rows.append(("grad-vi-loss", e < 1e-4, f"max rel err {e:.2e}"))
    e = max(network_grad_error(s) for s in seeds)
    rows.append(("grad-network", e < 1e-4, f"max rel err {e:.2e}"))
    ok = all(equivalence_exact(s) for s in seeds)
    rows.append(("simsiam-equals-vmf-kappa1", ok, "bit-for-bit"))
    diffs = [abs(welch_t_test(a, b).p - t_two_sided_p(*_t_dof(a, b))) for a, b in welch_cases()]
    rows.append(("welch-vs-t-quadrature", max(diffs) < 1e-6, f"max |dp| {max(diffs):.2e}"))
    return rows


def _t_dof(a, b):
    r = welch_t_test(a, b)
    return r.t, r.dof
