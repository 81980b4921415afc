import math

import numpy as np
import pytest
from scipy.special import gammaln

from visimsiam import autodiff as ad
from visimsiam.autodiff import Tensor, backward
from visimsiam.distributions import ps_log_normalizer
from visimsiam.losses import (
    LossInputError,
    ViewEmbeddings,
    loss_gradient_routing_check,
    per_term_grad_s,
    per_term_loss,
    simsiam_loss,
    vi_simsiam_loss,
    view_pairs,
    vmf_constant_kappa_loss,
)
from visimsiam.model import ModelConfig, init_parameters


def unit_rows(gen, n, d):
    x = gen.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def embeddings(seed, m=2, n=3, d=5, kappa=None):
    gen = np.random.default_rng(seed)
    z = [unit_rows(gen, n, d) for _ in range(m)]
    mu = [unit_rows(gen, n, d) for _ in range(m)]
    k = None if kappa is None else [np.full(n, float(kappa)) for _ in range(m)]
    return ViewEmbeddings(z, mu, k), z, mu


def test_simsiam_extremes():
    v = np.array([[0.0, 1.0, 0.0]])
    assert simsiam_loss(ViewEmbeddings([v, v], [v, v])).value == -2.0
    a, b = np.array([[1.0, 0.0, 0.0]]), np.array([[0.0, 1.0, 0.0]])
    assert simsiam_loss(ViewEmbeddings([b, b], [a, a])).value == 0.0


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_simsiam_matches_hand_sum(seed):
    e, z, mu = embeddings(seed)
    expected = -np.mean([mu[0][r] @ z[1][r] + mu[1][r] @ z[0][r] for r in range(3)])
    assert simsiam_loss(e).value == pytest.approx(expected, abs=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_vmf_kappa_one_equals_simsiam_bitwise(seed):
    e, _, _ = embeddings(seed, n=7, d=16)
    assert vmf_constant_kappa_loss(e, 1.0).total.data == simsiam_loss(e).total.data


def test_vmf_linear_in_kappa():
    e, _, _ = embeddings(3, m=3)
    base = vmf_constant_kappa_loss(e, 1.0).value
    for c in (0.5, 2.0, 37.0):
        assert vmf_constant_kappa_loss(e, c).value == pytest.approx(c * base, rel=1e-14)


def test_vmf_three_views_brute_force():
    e, z, mu = embeddings(4, m=3, n=4)
    expected = 0.0
    for i in range(3):
        for j in range(3):
            if i != j:
                expected -= 2.5 * np.mean(np.sum(mu[i] * z[j], axis=1))
    assert vmf_constant_kappa_loss(e, 2.5).value == pytest.approx(expected, abs=1e-13)


def test_vi_aligned_pair():
    gen = np.random.default_rng(0)
    mu1, mu2 = unit_rows(gen, 4, 3), unit_rows(gen, 4, 3)
    e = ViewEmbeddings([mu2, mu1], [mu1, mu2], [np.full(4, 7.0)] * 2)
    expected = -2 * (ps_log_normalizer(3, 7.0) + 7.0 * math.log(2))
    assert vi_simsiam_loss(e).value == pytest.approx(expected, abs=1e-12)


def test_vi_uniform_kappa_is_direction_free():
    for seed in range(3):
        e, _, _ = embeddings(seed, d=3, kappa=0.0)
        assert vi_simsiam_loss(e).value == pytest.approx(2 * math.log(4 * math.pi), abs=1e-12)


def test_vi_single_term_value():
    mu = np.array([[1.0, 0.0, 0.0]])
    z = np.array([[0.5, math.sqrt(0.75), 0.0]])
    e = ViewEmbeddings([mu, z], [mu, None], [np.array([10.0]), None])
    term = vi_simsiam_loss(e, pairs=[(0, 1)]).value
    assert term == pytest.approx(-(ps_log_normalizer(3, 10.0) + 10 * math.log(1.5)), abs=1e-12)


@pytest.mark.parametrize("kappa", [0.3, 1.0, 10.0, 250.0])
@pytest.mark.parametrize("m", [2, 4])
def test_vi_constant_kappa_is_scaled_log_cosine_plus_constant(kappa, m):
    e, z, mu = embeddings(int(kappa * 10) + m, m=m, n=6, d=8, kappa=kappa)
    pairs = view_pairs(m, "all")
    log_cos = sum(np.mean(np.log(1 + np.sum(mu[i] * z[j], axis=1))) for i, j in pairs)
    constant = -len(pairs) * ps_log_normalizer(8, kappa)
    assert vi_simsiam_loss(e).value - (-kappa * log_cos) == pytest.approx(constant, abs=1e-10)


def test_decomposition_sums_to_total():
    e, _, _ = embeddings(9, m=4, n=5, kappa=3.0)
    out = vi_simsiam_loss(e)
    assert abs(out.value - out.decomposition_sum()) < 1e-10
    out = vmf_constant_kappa_loss(e, 2.0)
    assert abs(out.value - out.decomposition_sum()) < 1e-10


def test_per_term_loss_matches_primitives():
    s = np.array([-0.5, 0.0, 0.5, 0.99])
    expected = [-(ps_log_normalizer(16, 4.0) + 4.0 * math.log1p(v)) for v in s]
    np.testing.assert_allclose(per_term_loss(4.0, s, 16), expected, atol=1e-12)


@pytest.mark.parametrize("kappa", [0.01, 1.0, 10.0, 100.0])
def test_per_term_monotone_decreasing_in_s(kappa):
    s = np.linspace(-0.9, 0.99, 200)
    assert np.all(np.diff(per_term_loss(kappa, s, 16)) < 0)


def test_small_kappa_is_nearly_flat():
    s = np.linspace(-0.9, 0.99, 200)
    v = per_term_loss(0.01, s, 16)
    assert v.max() - v.min() < 0.1


def test_similarity_gradient_grows_with_kappa():
    for s in (-0.5, 0.0, 0.7):
        g = [abs(per_term_grad_s(k, s)) for k in (0.01, 1.0, 10.0, 100.0)]
        assert g == sorted(g) and g[-1] > g[0]


def test_kappa_minimizer_increases_with_similarity():
    # for fixed s the loss in kappa has one minimum; better alignment wants larger kappa
    kappas = np.exp(np.linspace(math.log(0.01), math.log(1e4), 4000))
    best = []
    for s in (0.0, 0.5, 0.9, 0.99):
        best.append(kappas[np.argmin(per_term_loss(kappas, s, 16))])
    assert best == sorted(best) and best[0] < best[-1]
    # stationarity oracle: log 2 + psi(k + b) - psi(k + 2b) = log(1 + s), from differentiating gammaln
    b = 7.5
    h = 1e-6
    k = best[2]
    dlogc = (
        -((2 * b + k + h) * math.log(2) + gammaln(k + h + b) - gammaln(k + h + 2 * b))
        + ((2 * b + k - h) * math.log(2) + gammaln(k - h + b) - gammaln(k - h + 2 * b))
    ) / (2 * h)
    assert abs(dlogc + math.log(1.9)) < 5e-3


def test_view_pairs_modes():
    assert len(view_pairs(8, "standard")) == 2 * 7
    assert len(view_pairs(8, "all")) == 56
    mc = view_pairs(8, "multicrop")
    assert len(mc) == 14 and all(j < 2 for _, j in mc)
    assert (0, 0) in view_pairs(3, "all", include_same=True)
    assert view_pairs(2, "standard") == view_pairs(2, "all") == [(0, 1), (1, 0)]
    with pytest.raises(ValueError):
        view_pairs(3, "ring")


def test_stop_gradient_blocks_target_path():
    gen = np.random.default_rng(0)
    z = [Tensor(unit_rows(gen, 4, 5), requires_grad=True) for _ in range(2)]
    mu = [Tensor(unit_rows(gen, 4, 5), requires_grad=True) for _ in range(2)]
    backward(simsiam_loss(ViewEmbeddings(z, mu)).total)
    assert all(t.grad is None for t in z)
    assert all(np.abs(t.grad).sum() > 0 for t in mu)
    z2 = [Tensor(t.data, requires_grad=True) for t in z]
    backward(simsiam_loss(ViewEmbeddings(z2, mu), stop_gradient=False).total)
    assert all(np.abs(t.grad).sum() > 0 for t in z2)


def test_both_branches_detached_gives_no_encoder_gradient():
    w = Tensor(np.random.default_rng(0).standard_normal((3, 4)), requires_grad=True)
    x = [np.random.default_rng(i).standard_normal((5, 3)) for i in (1, 2)]
    z = [ad.l2_normalize(ad.matmul(Tensor(xi), w)) for xi in x]
    mu = [ad.detach(t) for t in z]
    out = simsiam_loss(ViewEmbeddings(z, mu)).total
    assert not out.requires_grad or backward(out) is not None
    assert w.grad is None or np.all(w.grad == 0)


def test_routing_check_on_small_network():
    cfg = ModelConfig(input_dim=6, hidden_dims=(8,), latent_dim=4, predictor_hidden=6)
    store = init_parameters(cfg, 0)
    gen = np.random.default_rng(0)
    rep = loss_gradient_routing_check(store, gen.standard_normal((5, 6)), gen.standard_normal((5, 6)))
    assert rep.target_grad_max == 0.0
    assert rep.predictor_grad_norm > 0 and rep.online_input_grad_norm > 0
    assert rep.kappa_grad_rel_error < 1e-4
    assert rep.ok


def test_input_validation():
    v = np.ones((2, 3)) / math.sqrt(3)
    with pytest.raises(LossInputError, match="at least 2"):
        ViewEmbeddings([v], [v])
    with pytest.raises(LossInputError, match="view 1"):
        ViewEmbeddings([v, np.ones((3, 3))], [v, v])
    bad = v.copy()
    bad[0, 0] = np.nan
    with pytest.raises(LossInputError, match="view 1: non-finite"):
        ViewEmbeddings([v, bad], [v, v])
    e = ViewEmbeddings([v, v, v], [v, v, v])
    with pytest.raises(LossInputError, match="2 views"):
        simsiam_loss(e)
    with pytest.raises(LossInputError, match="positive"):
        vmf_constant_kappa_loss(e, 0.0)
    with pytest.raises(LossInputError, match="kappa"):
        vi_simsiam_loss(e)
    with pytest.raises(LossInputError, match="non-negative"):
        vi_simsiam_loss(ViewEmbeddings([v, v], [v, v], [np.array([-1.0, 1.0])] * 2))


def test_antipodal_pair_stays_finite():
    a = np.array([[1.0, 0.0]])
    e = ViewEmbeddings([-a, a], [a, -a], [np.array([5.0])] * 2)
    assert math.isfinite(vi_simsiam_loss(e).value)
