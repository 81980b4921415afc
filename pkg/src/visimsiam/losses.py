"""Cross-view objectives: SimSiam cosine loss, the fixed-kappa vMF loss and
the kappa-weighted Power Spherical loss.

Every objective compares a predictor output mu_i of view i against the
stop-gradient latent z_j of another view j != i and averages over the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .distributions import ANTIPODAL_EPS

PAIRING_MODES = ("standard", "all", "multicrop")


class LossInputError(ValueError):
    pass


@dataclass
class ViewEmbeddings:
    """Per-view latents z_i and predictor outputs (mu_i, kappa_i).

    Views without a predictor output (``mu[i] is None``) act only as targets.
    """

    z: list[Tensor]
    mu: list[Tensor | None]
    kappa: list[Tensor | None] | None = None

    def __post_init__(self):
        self.z = [ad.as_tensor(t) for t in self.z]
        self.mu = [None if m is None else ad.as_tensor(m) for m in self.mu]
        if self.kappa is not None:
            self.kappa = [None if k is None else ad.as_tensor(k) for k in self.kappa]
        if len(self.z) < 2:
            raise LossInputError(f"need at least 2 views, got {len(self.z)}")
        if len(self.mu) != len(self.z):
            raise LossInputError("z and mu must list the same views")
        shape = self.z[0].shape
        for i, (z, m) in enumerate(zip(self.z, self.mu)):
            if z.shape != shape or (m is not None and m.shape != shape):
                raise LossInputError(f"view {i}: shape mismatch with view 0 {shape}")
            if not np.all(np.isfinite(z.data)) or (m is not None and not np.all(np.isfinite(m.data))):
                raise LossInputError(f"view {i}: non-finite latent")

    @property
    def num_views(self) -> int:
        return len(self.z)

    @property
    def batch_size(self) -> int:
        return self.z[0].shape[0]


@dataclass
class LossOutput:
    total: Tensor
    pair_terms: dict[tuple[int, int], float] = field(default_factory=dict)
    mean_kappa: list[float] = field(default_factory=list)
    log_normalizer_sum: float = 0.0

    @property
    def value(self) -> float:
        return self.total.item()

    def decomposition_sum(self) -> float:
        return math.fsum(self.pair_terms.values())


def view_pairs(
    num_views: int,
    mode: str = "standard",
    num_standard: int = 2,
    include_same: bool = False,
) -> list[tuple[int, int]]:
    """Ordered (predictor view, target view) pairs.

    ``standard``: the first ``num_standard`` views predict every other view.
    ``all``: every view predicts every other view.
    ``multicrop``: every view predicts the standard views.
    """
    if mode == "standard":
        preds, targets = range(min(num_standard, num_views)), range(num_views)
    elif mode == "all":
        preds, targets = range(num_views), range(num_views)
    elif mode == "multicrop":
        preds, targets = range(num_views), range(min(num_standard, num_views))
    else:
        raise ValueError(f"unknown pairing mode {mode!r}; expected one of {PAIRING_MODES}")
    return [(i, j) for i in preds for j in targets if include_same or i != j]


def _target(z: Tensor, stop_gradient: bool) -> Tensor:
    return ad.detach(z) if stop_gradient else z


def _rowdot(a: Tensor, b: Tensor) -> Tensor:
    return ad.sum_(ad.mul(a, b), axis=1)


def _cosine_loss(e: ViewEmbeddings, pairs, scale: float, stop_gradient: bool) -> LossOutput:
    terms, parts = {}, []
    for i, j in pairs:
        if e.mu[i] is None:
            raise LossInputError(f"view {i} has no predictor output")
        cos = _rowdot(e.mu[i], _target(e.z[j], stop_gradient))
        term = ad.mul(ad.mean(cos), -scale)
        terms[(i, j)] = term.item()
        parts.append(term)
    total = parts[0]
    for p in parts[1:]:
        total = ad.add(total, p)
    return LossOutput(total, terms)


def simsiam_loss(e: ViewEmbeddings, stop_gradient: bool = True) -> LossOutput:
    """-mean[mu_1 . sg(z_2) + mu_2 . sg(z_1)] for exactly two views."""
    if e.num_views != 2:
        raise LossInputError(f"simsiam_loss is defined for 2 views, got {e.num_views}")
    return _cosine_loss(e, [(0, 1), (1, 0)], 1.0, stop_gradient)


def vmf_constant_kappa_loss(
    e: ViewEmbeddings,
    kappa: float,
    pairs: Sequence[tuple[int, int]] | None = None,
    stop_gradient: bool = True,
) -> LossOutput:
    """-kappa * mean sum_{i != j} mu_i . sg(z_j): the vMF cross-view NLL up to its constant."""
    if not kappa > 0:
        raise LossInputError(f"kappa must be positive, got {kappa}")
    pairs = view_pairs(e.num_views, "all") if pairs is None else list(pairs)
    out = _cosine_loss(e, pairs, float(kappa), stop_gradient)
    out.mean_kappa = [float(kappa)] * e.num_views
    return out


def ps_log_normalizer_tensor(kappa: Tensor, d: int) -> Tensor:
    """Differentiable log C(kappa) of the Power Spherical density on S^{d-1}."""
    beta = 0.5 * (d - 1)
    const = -(2 * beta * math.log(2.0) + beta * math.log(math.pi))
    # log C = const - kappa log 2 - lgamma(kappa + beta) + lgamma(kappa + 2 beta)
    out = ad.sub(ad.lgamma(ad.add(kappa, 2 * beta)), ad.lgamma(ad.add(kappa, beta)))
    out = ad.sub(out, ad.mul(kappa, math.log(2.0)))
    return ad.add(out, const)


def ps_log_prob_tensor(mu: Tensor, kappa: Tensor, z: Tensor) -> Tensor:
    """Row-wise log PS(z; mu, kappa) with 1 + mu.z floored at ANTIPODAL_EPS."""
    d = mu.shape[-1]
    s = _rowdot(mu, z)
    log1p = ad.log(ad.clamp_min(ad.add(s, 1.0), ANTIPODAL_EPS))
    return ad.add(ps_log_normalizer_tensor(kappa, d), ad.mul(kappa, log1p))


def vi_simsiam_loss(
    e: ViewEmbeddings,
    pairs: Sequence[tuple[int, int]] | None = None,
    stop_gradient: bool = True,
) -> LossOutput:
    """-mean sum_{(i,j)} log PS(sg(z_j); mu_i, kappa_i)."""
    if e.kappa is None:
        raise LossInputError("vi_simsiam_loss needs per-view kappa")
    pairs = view_pairs(e.num_views, "all") if pairs is None else list(pairs)
    for i in {i for i, _ in pairs}:
        k = e.kappa[i]
        if e.mu[i] is None or k is None:
            raise LossInputError(f"view {i} has no predictor output")
        if not np.all(np.isfinite(k.data)) or np.any(k.data < 0):
            raise LossInputError(f"view {i}: kappa must be finite and non-negative")
    d = e.z[0].shape[1]
    terms, parts, lognorm = {}, [], 0.0
    for i, j in pairs:
        lp = ps_log_prob_tensor(e.mu[i], e.kappa[i], _target(e.z[j], stop_gradient))
        term = ad.mul(ad.mean(lp), -1.0)
        terms[(i, j)] = term.item()
        lognorm += float(np.mean(ps_log_normalizer_tensor(ad.detach(e.kappa[i]), d).data))
        parts.append(term)
    total = parts[0]
    for p in parts[1:]:
        total = ad.add(total, p)
    mean_kappa = [float(np.mean(k.data)) if k is not None else float("nan") for k in e.kappa]
    return LossOutput(total, terms, mean_kappa, lognorm)


def per_term_loss(kappa, s, d: int):
    """-[log C(kappa) + kappa log(1 + s)] elementwise (numpy, no graph)."""
    from scipy.special import gammaln

    kappa = np.asarray(kappa, dtype=np.float64)
    beta = 0.5 * (d - 1)
    logc = (
        -(2 * beta + kappa) * math.log(2.0)
        - beta * math.log(math.pi)
        - gammaln(kappa + beta)
        + gammaln(kappa + 2 * beta)
    )
    return -(logc + kappa * np.log(np.maximum(1.0 + np.asarray(s, dtype=np.float64), ANTIPODAL_EPS)))


def per_term_grad_s(kappa, s):
    """d/ds of the per-term loss: -kappa / (1 + s)."""
    return -np.asarray(kappa, dtype=np.float64) / (1.0 + np.asarray(s, dtype=np.float64))


@dataclass
class RoutingReport:
    target_grad_max: float
    online_input_grad_norm: float
    predictor_grad_norm: float
    kappa_grad_rel_error: float
    ok: bool


def loss_gradient_routing_check(store, x1: np.ndarray, x2: np.ndarray, step: float = 1e-6) -> RoutingReport:
    """Check stop-gradient placement of the VI loss on a small network.

    The target latents enter the loss only through ``detach`` and must get
    zero gradient; predictor parameters must get a non-zero gradient; the
    gradient with respect to each kappa_i must match central differences.
    """
    from .model import encode_with_raw, predict, predictor_input

    store = store.copy()
    enc = [encode_with_raw(store, x, training=True) for x in (x1, x2)]
    targets = [Tensor(z.data.copy(), requires_grad=True) for z, _ in enc]
    outs = [predict(store, predictor_input(store, z, raw), training=True) for z, raw in enc]
    kappas = [Tensor(o.kappa.data.copy(), requires_grad=True) for o in outs]

    def loss_fn(k1, k2, mus=(outs[0].mu, outs[1].mu)):
        e = ViewEmbeddings(targets, list(mus), [k1, k2])
        return vi_simsiam_loss(e).total

    backward_loss = loss_fn(*kappas, mus=(outs[0].mu, outs[1].mu))
    ad.backward(backward_loss)
    target_grad = max(0.0 if t.grad is None else float(np.abs(t.grad).max()) for t in targets)

    def grad_norm(prefix):
        gs = [store[k].grad for k in store.params if k.startswith(prefix)]
        return math.sqrt(sum(float(np.sum(g**2)) for g in gs if g is not None))

    pred_grad, enc_grad = grad_norm("pred."), grad_norm("enc.")

    mus = (ad.detach(outs[0].mu), ad.detach(outs[1].mu))
    report = ad.grad_check(
        lambda a, b: loss_fn(a, b, mus=mus),
        [k.data for k in kappas],
        step=step,
        tolerance=1e-4,
    )
    ok = target_grad == 0.0 and pred_grad > 0 and report.passed
    return RoutingReport(target_grad, enc_grad, pred_grad, report.max_rel_error, ok)
