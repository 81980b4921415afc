"""Training loop: augment, encode every view, predict, loss, backward,
momentum SGD with a cosine learning-rate schedule, per-epoch metrics and
checkpoints."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import Dataset, SynthConfig, ViewPolicy, generate_dataset, load_dataset, make_view_batch
from .losses import ViewEmbeddings, simsiam_loss, vi_simsiam_loss, view_pairs, vmf_constant_kappa_loss
from .model import (
    KAPPA_MAX,
    KAPPA_MIN,
    ModelConfig,
    ParameterStore,
    encode_with_raw,
    init_parameters,
    predict,
    predictor_input,
    save_checkpoint,
)
from .sphere import SeededRng

log = logging.getLogger(__name__)

LOSS_KINDS = ("simsiam", "vmf-const", "vi-simsiam")
NO_DECAY = frozenset({"pred.kappa.b"})


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    loss: str = "vi-simsiam"
    epochs: int = 100
    batch_size: int = 64
    base_lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    num_views: int = 8
    kappa_min: float = KAPPA_MIN
    kappa_max: float = KAPPA_MAX
    const_kappa: float = 1.0
    pairing: str = "multicrop"
    stop_gradient: bool = True
    use_predictor: bool = True
    checkpoint_every: int = 10
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    policy: ViewPolicy = field(default_factory=ViewPolicy)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if isinstance(self.policy, dict):
            self.policy = ViewPolicy(**self.policy)
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.num_views < 2:
            raise ValueError("num_views must be >= 2")
        if self.loss == "vi-simsiam" and not self.use_predictor:
            raise ValueError("vi-simsiam needs the predictor for its kappa head")
        self.model.kappa_head = self.loss == "vi-simsiam"
        self.model.kappa_min = self.kappa_min
        self.model.kappa_max = self.kappa_max

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def sgd_momentum_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    velocity: dict[str, np.ndarray],
    lr: float,
    momentum: float,
    weight_decay: float,
    no_decay=NO_DECAY,
) -> None:
    """In place: v <- momentum v + (g + wd p); p <- p - lr v."""
    if params.keys() != grads.keys():
        raise KeyError(f"parameter/gradient keys differ: {sorted(params.keys() ^ grads.keys())}")
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        wd = 0.0 if name in no_decay else weight_decay
        v = velocity.get(name)
        step = g + wd * p if wd else g
        v = step.copy() if v is None else momentum * v + step
        velocity[name] = v
        p -= lr * v


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    similarity_term: float
    log_normalizer_term: float
    kappa_train_mean: float
    kappa_mean: float
    kappa_std: float
    kappa_min: float
    kappa_max: float
    feature_std_mean: float
    feature_std_min: float
    lr: float


METRIC_FIELDS = list(EpochMetrics.__dataclass_fields__)


def _online_outputs(store, cfg: TrainConfig, z, raw, predictors):
    mus, kappas = [None] * len(z), [None] * len(z)
    for i in predictors:
        if cfg.use_predictor:
            out = predict(store, predictor_input(store, z[i], raw[i]), training=True)
            mus[i], kappas[i] = out.mu, out.kappa
        else:
            mus[i] = z[i]
    return mus, kappas


def compute_loss(
    store: ParameterStore,
    cfg: TrainConfig,
    views: list[np.ndarray],
    targets: list[np.ndarray] | None = None,
):
    """Loss for one minibatch of views.

    ``targets`` replaces the target-branch latents with fixed arrays; with
    them the loss is an ordinary function of the parameters whose gradient
    equals the stop-gradient gradient (used for finite-difference checks).
    """
    pairs = view_pairs(len(views), cfg.pairing, cfg.policy.num_standard)
    enc = [encode_with_raw(store, v, training=True) for v in views]
    z, raw = [e[0] for e in enc], [e[1] for e in enc]
    predictors = sorted({i for i, _ in pairs})
    mus, kappas = _online_outputs(store, cfg, z, raw, predictors)
    if targets is not None:
        z = [ad.Tensor(t) for t in targets]
    if cfg.loss == "vi-simsiam":
        e = ViewEmbeddings(z, mus, kappas)
        return vi_simsiam_loss(e, pairs, stop_gradient=cfg.stop_gradient)
    e = ViewEmbeddings(z, mus)
    if cfg.loss == "simsiam" and len(views) == 2:
        return simsiam_loss(e, stop_gradient=cfg.stop_gradient)
    kappa = 1.0 if cfg.loss == "simsiam" else cfg.const_kappa
    return vmf_constant_kappa_loss(e, kappa, pairs, stop_gradient=cfg.stop_gradient)


def eval_features(store: ParameterStore, x: np.ndarray, batch: int = 1024):
    """Eval-mode latents and (if present) kappa for un-augmented inputs."""
    zs, ks = [], []
    for s in range(0, x.shape[0], batch):
        z, raw = encode_with_raw(store, x[s : s + batch], training=False)
        zs.append(z.data)
        if store.config.kappa_head:
            ks.append(predict(store, predictor_input(store, z, raw), training=False).kappa.data)
    z = np.concatenate(zs) if zs else np.empty((0, store.config.latent_dim))
    k = np.concatenate(ks) if ks else None
    return z, k


def _write_metrics(rows: list[EpochMetrics], out_dir: Path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in asdict(r).values()])
    tmp = out_dir / "metrics.csv.tmp"
    tmp.write_text(buf.getvalue())
    tmp.replace(out_dir / "metrics.csv")
    tmp = out_dir / "metrics.json.tmp"
    tmp.write_text(json.dumps([asdict(r) for r in rows], indent=1))
    tmp.replace(out_dir / "metrics.json")


@dataclass
class TrainResult:
    store: ParameterStore
    metrics: list[EpochMetrics]
    checkpoints: list[Path] = field(default_factory=list)
    wall_time: float = 0.0


def train_run(
    cfg: TrainConfig,
    data: Dataset | SynthConfig | str | Path,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Pretrain an encoder on the train split of ``data``."""
    if isinstance(data, SynthConfig):
        data = generate_dataset(data)
    elif not isinstance(data, Dataset):
        data = load_dataset(data)
    x_train = data["train"].features
    if x_train.shape[1] != cfg.model.input_dim:
        raise ValueError(f"dataset dim {x_train.shape[1]} != model input_dim {cfg.model.input_dim}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    root = SeededRng(cfg.seed)
    store = init_parameters(cfg.model, cfg.seed)
    names = list(store.params)
    velocity: dict[str, np.ndarray] = {}
    n = x_train.shape[0]
    bs = min(cfg.batch_size, n)
    starts = [s for s in range(0, n, bs) if n - s >= 2]
    total_steps = cfg.epochs * len(starts)
    step = 0
    rows: list[EpochMetrics] = []
    ckpts: list[Path] = []
    best = math.inf
    t0 = time.perf_counter()

    for epoch in range(1, cfg.epochs + 1):
        erng = root.split(1, epoch).generator
        order = erng.permutation(n)
        losses, sims, norms, ktrain = [], [], [], []
        for b, s in enumerate(starts):
            idx = order[s : s + bs]
            vb = make_view_batch(x_train[idx], cfg.num_views, cfg.policy, root.split(2, epoch, b))
            out_loss = compute_loss(store, cfg, vb.views)
            value = out_loss.value
            if not math.isfinite(value):
                km = [k for k in out_loss.mean_kappa if not math.isnan(k)]
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} step {b}; last mean kappa per view: {km}"
                )
            ad.backward(out_loss.total)
            lr = cosine_lr(step, total_steps, cfg.base_lr)
            grads = {}
            for k in names:
                g = store[k].grad
                grads[k] = np.zeros(store[k].shape) if g is None else g
                store[k].grad = None
            sgd_momentum_step(store.named_arrays(), grads, velocity, lr, cfg.momentum, cfg.weight_decay)
            step += 1
            losses.append(value)
            norms.append(-out_loss.log_normalizer_sum)
            sims.append(value + out_loss.log_normalizer_sum)
            km = [k for k in out_loss.mean_kappa if not math.isnan(k)]
            if km:
                ktrain.append(float(np.mean(km)))

        z, kappa = eval_features(store, x_train)
        fstd = z.std(axis=0)
        if kappa is None:
            kappa = np.full(1, np.nan)
        row = EpochMetrics(
            epoch=epoch,
            loss=float(np.mean(losses)),
            similarity_term=float(np.mean(sims)),
            log_normalizer_term=float(np.mean(norms)),
            kappa_train_mean=float(np.mean(ktrain)) if ktrain else float("nan"),
            kappa_mean=float(np.mean(kappa)),
            kappa_std=float(np.std(kappa)),
            kappa_min=float(np.min(kappa)),
            kappa_max=float(np.max(kappa)),
            feature_std_mean=float(fstd.mean()),
            feature_std_min=float(fstd.min()),
            lr=cosine_lr(step, total_steps, cfg.base_lr),
        )
        rows.append(row)
        log.info(
            "epoch %d loss %.5f kappa %.2f+-%.2f feat-std %.4f",
            epoch, row.loss, row.kappa_mean, row.kappa_std, row.feature_std_mean,
        )
        if out is not None:
            _write_metrics(rows, out)
            extra = {"train_config": cfg.to_dict()}
            if epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs:
                p = out / f"epoch{epoch:04d}.ckpt"
                save_checkpoint(store, p, epoch, extra)
                ckpts.append(p)
            if row.loss < best:
                best = row.loss
                save_checkpoint(store, out / "best.ckpt", epoch, extra)
    if out is not None:
        save_checkpoint(store, out / "final.ckpt", cfg.epochs, {"train_config": cfg.to_dict()})
        ckpts.append(out / "final.ckpt")
    return TrainResult(store, rows, ckpts, time.perf_counter() - t0)
