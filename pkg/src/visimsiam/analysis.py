"""Evaluation on frozen encoders: linear probe, kappa statistics and their
relation to ambiguity, probe correctness and augmentation kind, Welch's
t-test, loss-surface tables and a 2-D principal-component projection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .data import AUG_KINDS, Dataset, Split, ViewPolicy, augment_batch, make_view_batch
from .losses import per_term_grad_s, per_term_loss
from .model import ParameterStore, encode_with_raw, predict, predictor_input
from .sphere import SeededRng
from .train import eval_features


class AnalysisError(ValueError):
    pass


# linear probe


@dataclass
class ProbeConfig:
    epochs: int = 200
    lr: float = 0.1
    batch_size: int = 64
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class ProbeResult:
    top1: float
    top5: float | None
    val_top1: float
    best_epoch: int
    correct: np.ndarray
    weights: np.ndarray = field(repr=False)
    bias: np.ndarray = field(repr=False)


def _softmax(logits):
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def _topk(logits, labels, k):
    if k == 1:
        return logits.argmax(axis=1) == labels
    top = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return (top == labels[:, None]).any(axis=1)


def train_linear_probe(
    train: tuple[np.ndarray, np.ndarray],
    val: tuple[np.ndarray, np.ndarray],
    test: tuple[np.ndarray, np.ndarray],
    num_classes: int,
    cfg: ProbeConfig | None = None,
) -> ProbeResult:
    """Softmax regression by minibatch SGD; keeps the epoch with best val top-1."""
    cfg = cfg or ProbeConfig()
    xtr, ytr = train
    for _, y in (train, val, test):
        if y.size and (y.min() < 0 or y.max() >= num_classes):
            raise AnalysisError(f"labels outside [0, {num_classes})")
    dim = xtr.shape[1]
    gen = SeededRng(cfg.seed, (0x9B0BE,)).generator
    w = np.zeros((dim, num_classes))
    b = np.zeros(num_classes)
    vw, vb = np.zeros_like(w), np.zeros_like(b)
    onehot = np.eye(num_classes)[ytr]
    best = (-1.0, 0, w.copy(), b.copy())
    n = xtr.shape[0]
    for epoch in range(1, cfg.epochs + 1):
        order = gen.permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            p = _softmax(xtr[idx] @ w + b)
            g = (p - onehot[idx]) / idx.size
            vw = cfg.momentum * vw + xtr[idx].T @ g
            vb = cfg.momentum * vb + g.sum(axis=0)
            w -= cfg.lr * vw
            b -= cfg.lr * vb
        acc = float(np.mean(_topk(val[0] @ w + b, val[1], 1))) if val[1].size else 0.0
        if acc > best[0]:
            best = (acc, epoch, w.copy(), b.copy())
    val_acc, epoch, w, b = best
    logits = test[0] @ w + b
    correct = _topk(logits, test[1], 1)
    top5 = float(np.mean(_topk(logits, test[1], 5))) if num_classes >= 10 else None
    return ProbeResult(float(np.mean(correct)), top5, val_acc, epoch, correct, w, b)


def linear_probe(store: ParameterStore, dataset: Dataset, cfg: ProbeConfig | None = None) -> ProbeResult:
    """Probe frozen eval-mode encoder outputs of un-augmented samples."""
    if dataset["train"].features.shape[1] != store.config.input_dim:
        raise AnalysisError("dataset dimension does not match the checkpoint")
    feats = {name: (eval_features(store, dataset[name].features)[0], dataset[name].labels) for name in ("train", "val", "test")}
    return train_linear_probe(feats["train"], feats["val"], feats["test"], dataset.config.num_classes, cfg)


# summary statistics and Welch's test


def box_stats(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return {"n": 0}
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    lo, hi = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    return {
        "n": int(v.size),
        "mean": float(v.mean()),
        "std": float(v.std(ddof=1)) if v.size > 1 else 0.0,
        "var": float(v.var(ddof=1)) if v.size > 1 else 0.0,
        "min": float(v.min()),
        "q1": float(q1),
        "median": float(med),
        "q3": float(q3),
        "max": float(v.max()),
        "outliers": int(np.sum((v < lo) | (v > hi))),
    }


@dataclass
class WelchResult:
    t: float
    dof: float
    p: float


def welch_t_test(a, b) -> WelchResult:
    """Two-sided Welch test of equal means without assuming equal variances."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise AnalysisError("each group needs at least 2 values")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    if va + vb == 0.0:
        raise AnalysisError("both groups have zero variance")
    diff = a.mean() - b.mean()
    t = diff / math.sqrt(va + vb)
    dof = (va + vb) ** 2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    # P(|T| > |t|) = I_{dof/(dof+t^2)}(dof/2, 1/2)
    p = float(special.betainc(0.5 * dof, 0.5, dof / (dof + t * t)))
    return WelchResult(float(t), float(dof), p)


# kappa analyses


@dataclass
class KappaReport:
    per_sample: np.ndarray
    labels: np.ndarray
    ambiguous: np.ndarray
    by_class: dict[int, dict]
    by_ambiguity: dict[str, dict]
    summary: dict
    ambiguity_test: WelchResult | None = None
    by_view_type: dict[str, dict] = field(default_factory=dict)


def _require_kappa(store: ParameterStore):
    if not store.config.kappa_head:
        raise AnalysisError("checkpoint has no kappa head (not a vi-simsiam model)")


def view_kappas(store: ParameterStore, views: list[np.ndarray]) -> np.ndarray:
    """Eval-mode kappa for every view; shape [num_views, n]."""
    out = []
    for v in views:
        z, raw = encode_with_raw(store, v, training=False)
        out.append(predict(store, predictor_input(store, z, raw), training=False).kappa.data)
    return np.stack(out)


def kappa_statistics(
    store: ParameterStore,
    split: Split,
    views_per_sample: int = 8,
    seed: int = 0,
    policy: ViewPolicy | None = None,
) -> KappaReport:
    """Average predicted kappa over random views of every sample and group it."""
    _require_kappa(store)
    policy = policy or ViewPolicy()
    vb = make_view_batch(split.features, views_per_sample, policy, SeededRng(seed, (0x7A,)))
    per_view = view_kappas(store, vb.views)
    per_sample = per_view.mean(axis=0)
    ns = min(policy.num_standard, views_per_sample)
    by_view = {"standard": box_stats(per_view[:ns].ravel())}
    if views_per_sample > ns:
        by_view["heavy-mask"] = box_stats(per_view[ns:].ravel())
    by_class = {int(c): box_stats(per_sample[split.labels == c]) for c in np.unique(split.labels)}
    by_amb = {
        "clean": box_stats(per_sample[~split.ambiguous]),
        "ambiguous": box_stats(per_sample[split.ambiguous]),
    }
    test = None
    if split.ambiguous.sum() >= 2 and (~split.ambiguous).sum() >= 2:
        try:
            test = welch_t_test(per_sample[split.ambiguous], per_sample[~split.ambiguous])
        except AnalysisError:
            test = None
    return KappaReport(per_sample, split.labels, split.ambiguous, by_class, by_amb, box_stats(per_sample), test, by_view)


@dataclass
class AugmentationKappaReport:
    per_kind: dict[str, np.ndarray]
    stats: dict[str, dict]
    tests_vs_base: dict[str, WelchResult | None]

    def variance_ratio(self, a: str = "mask", b: str = "noise") -> float:
        return self.stats[a]["var"] / self.stats[b]["var"]


def kappa_by_augmentation(
    store: ParameterStore,
    split: Split,
    repeats: int = 1,
    seed: int = 0,
    kinds=AUG_KINDS,
    policy: ViewPolicy | None = None,
) -> AugmentationKappaReport:
    """Kappa of single-augmentation views, ``repeats`` views per sample and kind.

    Mask severity comes from the policy's heavy range; every other kind
    draws severity U(0, 1).  Group statistics are over all views.
    """
    _require_kappa(store)
    policy = policy or ViewPolicy()
    root = SeededRng(seed, (0xA6,))
    x = split.features
    per_kind = {"base": view_kappas(store, [x])[0]}
    for k, kind in enumerate(kinds):
        gen = root.split(k).generator
        lo, hi = (policy.heavy_min, policy.heavy_max) if kind == "mask" else (0.0, 1.0)
        views = [
            augment_batch(x, kind, gen.uniform(lo, hi, x.shape[0]), gen, noise_scale=policy.noise_scale)
            for _ in range(repeats)
        ]
        per_kind[kind] = view_kappas(store, views).ravel()
    stats = {k: box_stats(v) for k, v in per_kind.items()}
    tests = {}
    for k in kinds:
        try:
            tests[k] = welch_t_test(per_kind[k], per_kind["base"])
        except AnalysisError:
            tests[k] = None
    return AugmentationKappaReport(per_kind, stats, tests)


@dataclass
class CorrectnessReport:
    correct: dict
    incorrect: dict
    test: WelchResult | None
    applicable: bool
    reason: str = ""


def correctness_kappa_analysis(correct, kappa) -> CorrectnessReport:
    """Compare per-sample kappa between probe-correct and probe-incorrect samples."""
    correct = np.asarray(correct, dtype=bool)
    kappa = np.asarray(kappa, dtype=np.float64)
    if correct.shape != kappa.shape:
        raise AnalysisError("correctness flags and kappas must align")
    good, bad = kappa[correct], kappa[~correct]
    rep = CorrectnessReport(box_stats(good), box_stats(bad), None, False)
    if good.size < 2 or bad.size < 2:
        rep.reason = "all-correct or all-incorrect probe"
        return rep
    if np.ptp(kappa) == 0.0:
        rep.reason = "zero variance"
        return rep
    rep.test = welch_t_test(bad, good)
    rep.applicable = True
    return rep


# loss surface


def loss_surface_grid(d: int, kappas, s_grid) -> list[tuple[float, float, float, float]]:
    """Rows (kappa, s, per-term loss, d loss / d s) over the grid."""
    rows = []
    s = np.asarray(s_grid, dtype=np.float64)
    if np.any(s < -1) or np.any(s >= 1):
        raise AnalysisError("similarities must lie in [-1, 1)")
    for k in kappas:
        if not k > 0:
            raise AnalysisError("kappa must be positive")
        vals = per_term_loss(k, s, d)
        grads = per_term_grad_s(k, s)
        rows.extend((float(k), float(si), float(v), float(g)) for si, v, g in zip(s, vals, grads))
    return rows


# 2-D projection


@dataclass
class Projection:
    coords: np.ndarray
    components: np.ndarray
    variances: np.ndarray
    mean: np.ndarray


def project_2d(features, iters: int = 1000, tol: float = 1e-13) -> Projection:
    """Top-2 principal components by power iteration with deflation."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise AnalysisError("need at least 3 samples")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (x.shape[0] - 1)
    scale = np.trace(cov)
    if scale == 0:
        raise AnalysisError("data has rank < 2")
    comps, vals = [], []
    c = cov.copy()
    gen = SeededRng(0, (0x9CA,)).generator
    for _ in range(2):
        v = gen.standard_normal(c.shape[0])
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(iters):
            w = c @ v
            nw = np.linalg.norm(w)
            if nw == 0:
                break
            w /= nw
            done = np.linalg.norm(w - v) < tol
            v = w
            if done:
                break
        lam = float(v @ c @ v)
        if lam <= 1e-12 * scale:
            raise AnalysisError("data has rank < 2")
        v = v * np.sign(v[np.argmax(np.abs(v))])
        comps.append(v)
        vals.append(lam)
        c = c - lam * np.outer(v, v)
    comps = np.stack(comps)
    # re-orthonormalize the second against the first
    comps[1] -= (comps[1] @ comps[0]) * comps[0]
    comps[1] /= np.linalg.norm(comps[1])
    return Projection(xc @ comps.T, comps, np.asarray(vals), mean)
