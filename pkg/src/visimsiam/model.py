"""Encoder f (MLP backbone with a normalized output) and predictor h.

The online network is g = h o f.  The predictor emits d + 1 values per
row: d of them are normalized into the mean direction mu, the last goes
through softplus plus a learned offset to give the concentration kappa.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import BatchStats, Tensor
from .sphere import SeededRng

KAPPA_MAX = 1e5
KAPPA_MIN = 1e-6
CHECKPOINT_MAGIC = b"VISSCKPT"
CHECKPOINT_VERSION = 1


def softplus_inverse(y: float) -> float:
    return y + math.log(-math.expm1(-y))


@dataclass
class ModelConfig:
    input_dim: int = 64
    hidden_dims: tuple[int, ...] = (256, 256)
    latent_dim: int = 16
    predictor_hidden: int = 64
    use_batch_standardize: bool = True
    kappa_head: bool = True
    kappa_init: float = 10.0
    kappa_min: float = KAPPA_MIN
    kappa_max: float = KAPPA_MAX
    predictor_input: str = "raw"

    def __post_init__(self):
        if self.predictor_input not in ("raw", "unit"):
            raise ValueError("predictor_input must be 'raw' or 'unit'")
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        dims = (self.input_dim, *self.hidden_dims, self.latent_dim, self.predictor_hidden)
        if any(d <= 0 for d in dims):
            raise ValueError(f"all layer widths must be positive: {dims}")
        if self.latent_dim < 2:
            raise ValueError("latent_dim must be >= 2")
        if not 0 < self.kappa_min < self.kappa_max <= KAPPA_MAX:
            raise ValueError("kappa bounds must satisfy 0 < min < max <= 1e5")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ParameterStore:
    config: ModelConfig
    seed: int
    params: dict[str, Tensor] = field(default_factory=dict)
    buffers: dict[str, BatchStats] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def copy(self) -> "ParameterStore":
        return ParameterStore(
            self.config,
            self.seed,
            {k: Tensor(t.data.copy(), requires_grad=True, name=k) for k, t in self.params.items()},
            {k: BatchStats(b.mean.copy(), b.var.copy(), b.momentum) for k, b in self.buffers.items()},
        )


def _kaiming_uniform(gen: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return gen.uniform(-bound, bound, size=(fan_in, fan_out))


def init_parameters(config: ModelConfig, seed: int) -> ParameterStore:
    gen = SeededRng(seed, (0x1A17,)).generator
    store = ParameterStore(config, int(seed))

    def add_layer(name, fan_in, fan_out, bias=True):
        store.params[f"{name}.w"] = Tensor(_kaiming_uniform(gen, fan_in, fan_out), True, f"{name}.w")
        if bias:
            store.params[f"{name}.b"] = Tensor(np.zeros(fan_out), True, f"{name}.b")

    width = config.input_dim
    for i, h in enumerate(config.hidden_dims):
        add_layer(f"enc.{i}", width, h)
        if config.use_batch_standardize:
            store.buffers[f"enc.{i}"] = BatchStats.init(h)
        width = h
    add_layer("enc.out", width, config.latent_dim)

    d = config.latent_dim
    add_layer("pred.0", d, config.predictor_hidden)
    if config.use_batch_standardize:
        store.buffers["pred.0"] = BatchStats.init(config.predictor_hidden)
    out_width = d + 1 if config.kappa_head else d
    add_layer("pred.out", config.predictor_hidden, out_width, bias=False)
    store.params["pred.out.b"] = Tensor(np.zeros(d), True, "pred.out.b")
    if config.kappa_head:
        kb = softplus_inverse(config.kappa_init)
        store.params["pred.kappa.b"] = Tensor(np.array([kb]), True, "pred.kappa.b")
    return store


def _mlp_block(store, name, x, training, use_bs):
    h = ad.linear(x, store[f"{name}.w"], store[f"{name}.b"])
    if use_bs:
        h = ad.batch_standardize(h, store.buffers[name], training=training)
    return ad.relu(h)


def encode(store: ParameterStore, x, training: bool = False) -> Tensor:
    """Map a batch [n, input_dim] to unit-norm latents [n, d]."""
    return encode_with_raw(store, x, training)[0]


def encode_with_raw(store: ParameterStore, x, training: bool = False) -> tuple[Tensor, Tensor]:
    """Unit-norm latents together with the pre-normalization projector output."""
    cfg = store.config
    x = ad.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise ad.ShapeError("encode", x.shape, (None, cfg.input_dim))
    h = x
    for i in range(len(cfg.hidden_dims)):
        h = _mlp_block(store, f"enc.{i}", h, training, cfg.use_batch_standardize)
    z = ad.linear(h, store["enc.out.w"], store["enc.out.b"])
    return ad.l2_normalize(z), z


def predictor_input(store: ParameterStore, z_unit: Tensor, z_raw: Tensor) -> Tensor:
    return z_raw if store.config.predictor_input == "raw" else z_unit


@dataclass
class PredictorOutput:
    mu: Tensor
    kappa: Tensor | None


def predict(store: ParameterStore, z, training: bool = False) -> PredictorOutput:
    cfg = store.config
    z = ad.as_tensor(z)
    d = cfg.latent_dim
    if z.ndim != 2 or z.shape[1] != d:
        raise ad.ShapeError("predict", z.shape, (None, d))
    h = _mlp_block(store, "pred.0", z, training, cfg.use_batch_standardize)
    y = ad.matmul(h, store["pred.out.w"])
    mu = ad.l2_normalize(ad.add(y[:, :d], store["pred.out.b"]))
    if not cfg.kappa_head:
        return PredictorOutput(mu, None)
    k = ad.softplus(ad.add(y[:, d:], store["pred.kappa.b"]))
    k = ad.clamp(k, cfg.kappa_min, cfg.kappa_max)
    return PredictorOutput(mu, k[:, 0])


# checkpoints: magic, u32 version, u64 header length, JSON header, raw <f8 arrays


def save_checkpoint(store: ParameterStore, path, epoch: int = 0, extra: dict | None = None) -> None:
    arrays: list[tuple[str, np.ndarray]] = [(k, t.data) for k, t in store.params.items()]
    for k, b in store.buffers.items():
        arrays.append((f"buffer:{k}:mean", b.mean))
        arrays.append((f"buffer:{k}:var", b.var))
    entries, offset = [], 0
    for name, a in arrays:
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size * 8
    header = {
        "format": "visimsiam-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": store.config.to_dict(),
        "seed": store.seed,
        "epoch": int(epoch),
        "arrays": entries,
        "extra": extra or {},
    }
    raw = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(raw)))
        fh.write(raw)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    tmp.replace(path)


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> tuple[ParameterStore, dict]:
    blob = Path(path).read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", blob, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = 8 + struct.calcsize("<IQ")
    header = json.loads(blob[start : start + hlen])
    body = memoryview(blob)[start + hlen :]
    store = ParameterStore(ModelConfig.from_dict(header["config"]), header["seed"])
    stats: dict[str, dict[str, np.ndarray]] = {}
    for e in header["arrays"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        a = np.frombuffer(body, dtype="<f8", count=n, offset=e["offset"]).reshape(e["shape"]).astype(np.float64)
        name = e["name"]
        if name.startswith("buffer:"):
            _, layer, kind = name.split(":")
            stats.setdefault(layer, {})[kind] = a
        else:
            store.params[name] = Tensor(a, requires_grad=True, name=name)
    for layer, s in stats.items():
        store.buffers[layer] = BatchStats(s["mean"], s["var"])
    return store, header
