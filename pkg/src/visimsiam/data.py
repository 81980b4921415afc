"""Synthetic multiview data: class prototypes in feature space, ambiguous
samples mixed from two prototypes, and vector-space augmentations standing
in for image augmentations (mask plays the role of random crop).
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .sphere import SeededRng, as_rng

AUG_KINDS = ("noise", "scale-jitter", "coordinate-flip", "channel-drop", "mask")
# pipeline order for standard views: crop first, blur last
PIPELINE_ORDER = ("mask", "coordinate-flip", "scale-jitter", "channel-drop", "noise")
NOISE_SCALE = 0.5
NUM_BLOCKS = 8
MAX_MASK_FRACTION = 0.95
SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = (0.7, 0.1, 0.2)
DATA_MAGIC = b"VISSDATA"
DATA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class SynthConfig:
    num_classes: int = 10
    input_dim: int = 64
    samples_per_class: int = 200
    ambiguity_fraction: float = 0.1
    ambiguity_mix: float = 0.6
    noise_scale: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.input_dim < NUM_BLOCKS:
            raise ConfigError(f"input_dim must be >= {NUM_BLOCKS}")
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be >= 1")
        if not 0.0 <= self.ambiguity_fraction <= 1.0:
            raise ConfigError("ambiguity_fraction must lie in [0, 1]")
        if not 0.0 <= self.ambiguity_mix <= 1.0:
            raise ConfigError("ambiguity_mix must lie in [0, 1]")
        if self.ambiguity_fraction > 0 and self.ambiguity_mix <= 0.5:
            raise ConfigError("ambiguity_mix must exceed 0.5 so the label stays the dominant class")
        if self.noise_scale < 0:
            raise ConfigError("noise_scale must be non-negative")

    @property
    def ambiguous_per_class(self) -> int:
        return int(math.floor(self.ambiguity_fraction * self.samples_per_class + 1e-9))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Sample:
    features: np.ndarray
    label: int
    ambiguous: bool = False
    mix_partner: int | None = None

    def __post_init__(self):
        if self.ambiguous != (self.mix_partner is not None):
            raise ValueError("ambiguous samples carry a mix partner and only they do")


@dataclass
class Split:
    features: np.ndarray
    labels: np.ndarray
    ambiguous: np.ndarray
    partner: np.ndarray

    def __len__(self):
        return self.labels.size

    def sample(self, i: int) -> Sample:
        p = int(self.partner[i])
        return Sample(self.features[i], int(self.labels[i]), bool(self.ambiguous[i]), None if p < 0 else p)


@dataclass
class Dataset:
    config: SynthConfig
    prototypes: np.ndarray
    splits: dict[str, Split]

    def __getitem__(self, name: str) -> Split:
        return self.splits[name]


def make_prototypes(num_classes: int, dim: int, rng, max_cos: float = 0.5, max_rejections: int = 10_000):
    gen = as_rng(rng)
    protos: list[np.ndarray] = []
    rejections = 0
    while len(protos) < num_classes:
        v = gen.standard_normal(dim)
        v /= np.linalg.norm(v)
        if all(float(v @ p) < max_cos for p in protos):
            protos.append(v)
            continue
        rejections += 1
        if rejections >= max_rejections:
            raise ConfigError(f"cannot place {num_classes} prototypes with cosine < {max_cos} in dim {dim}")
    return np.stack(protos)


def generate_dataset(config: SynthConfig) -> Dataset:
    root = SeededRng(config.seed)
    protos = make_prototypes(config.num_classes, config.input_dim, root.split(0))
    K, n = config.num_classes, config.samples_per_class
    n_amb = config.ambiguous_per_class
    lam = config.ambiguity_mix
    feats = np.empty((K * n, config.input_dim))
    labels = np.repeat(np.arange(K), n)
    amb = np.zeros(K * n, dtype=bool)
    partner = np.full(K * n, -1, dtype=np.int64)
    split_of = np.empty(K * n, dtype=np.int64)
    n_train = int(round(SPLIT_FRACTIONS[0] * n))
    n_val = int(round(SPLIT_FRACTIONS[1] * n))
    for a in range(K):
        for i in range(n):
            idx = a * n + i
            gen = root.split(1, a, i).generator
            if i < n_amb:
                b = int(gen.integers(K - 1))
                b += b >= a
                center = lam * protos[a] + (1 - lam) * protos[b]
                center /= np.linalg.norm(center)
                amb[idx], partner[idx] = True, b
            else:
                center = protos[a]
            feats[idx] = center + config.noise_scale * gen.standard_normal(config.input_dim)
        # per-class stratified split
        order = root.split(2, a).generator.permutation(n)
        split_of[a * n + order[:n_train]] = 0
        split_of[a * n + order[n_train : n_train + n_val]] = 1
        split_of[a * n + order[n_train + n_val :]] = 2
    splits = {}
    for s, name in enumerate(SPLITS):
        m = split_of == s
        splits[name] = Split(feats[m], labels[m], amb[m], partner[m])
    return Dataset(config, protos, splits)


# augmentations


@dataclass(frozen=True)
class AugmentationSpec:
    kind: str
    severity: float

    def __post_init__(self):
        if self.kind not in AUG_KINDS:
            raise ValueError(f"unknown augmentation {self.kind!r}")
        if not 0.0 <= self.severity <= 1.0:
            raise ValueError("severity must lie in [0, 1]")

    @property
    def masked_fraction(self) -> float:
        return self.severity * MAX_MASK_FRACTION


def _blocks(dim: int) -> np.ndarray:
    return np.minimum(np.arange(dim) * NUM_BLOCKS // dim, NUM_BLOCKS - 1)


def augment_batch(
    x: np.ndarray, kind: str, severity: np.ndarray, rng, noise_scale: float = NOISE_SCALE
) -> np.ndarray:
    """Apply one augmentation kind to every row of x with per-row severities."""
    gen = as_rng(rng)
    x = np.array(x, dtype=np.float64)
    n, dim = x.shape
    sev = np.broadcast_to(np.asarray(severity, dtype=np.float64), (n,))
    if kind == "noise":
        return x + (sev * noise_scale)[:, None] * gen.standard_normal((n, dim))
    if kind == "scale-jitter":
        u = gen.uniform(-1.0, 1.0, size=(n, NUM_BLOCKS))
        return x * (1.0 + sev[:, None] * u)[:, _blocks(dim)]
    if kind == "coordinate-flip":
        # involution i <-> dim-1-i applied on a random subset of the pairs
        half = dim // 2
        k = np.floor(sev * half + 1e-9).astype(int)
        ranks = np.argsort(gen.random((n, half)), axis=1)
        chosen = ranks < k[:, None]
        idx = np.tile(np.arange(dim), (n, 1))
        lo = np.arange(half)
        hi = dim - 1 - lo
        idx[:, :half] = np.where(chosen, hi, lo)
        idx[:, dim - half :] = np.where(chosen, lo, hi)[:, ::-1]
        return np.take_along_axis(x, idx, axis=1)
    if kind == "channel-drop":
        block = _blocks(dim) == 0
        x[:, block] *= (1.0 - sev)[:, None]
        return x
    if kind == "mask":
        count = np.floor(sev * MAX_MASK_FRACTION * dim + 1e-9).astype(int)
        start = np.floor(gen.random(n) * (dim - count + 1)).astype(int)
        pos = np.arange(dim)
        masked = (pos >= start[:, None]) & (pos < (start + count)[:, None])
        x[masked] = 0.0
        return x
    raise ValueError(f"unknown augmentation {kind!r}")


def augment(features: np.ndarray, spec: AugmentationSpec, rng, noise_scale: float = NOISE_SCALE) -> np.ndarray:
    return augment_batch(np.asarray(features)[None, :], spec.kind, spec.severity, rng, noise_scale)[0]


@dataclass
class ViewPolicy:
    """Standard views apply each pipeline kind with probability ``p_apply``
    at severity U(0, standard_max); heavy views additionally force a mask with
    severity U(heavy_min, heavy_max)."""

    num_standard: int = 2
    p_apply: float = 0.5
    standard_max: float = 0.5
    heavy_min: float = 0.6
    heavy_max: float = 0.95
    noise_scale: float = NOISE_SCALE


@dataclass
class ViewBatch:
    views: list[np.ndarray]
    # kinds applied: [view][kind] boolean per row, severities likewise
    applied: list[dict[str, np.ndarray]] = field(default_factory=list)
    severity: list[dict[str, np.ndarray]] = field(default_factory=list)

    @property
    def num_views(self) -> int:
        return len(self.views)

    def specs(self, view: int, row: int) -> list[AugmentationSpec]:
        return [
            AugmentationSpec(k, float(self.severity[view][k][row]))
            for k in PIPELINE_ORDER
            if self.applied[view][k][row]
        ]


def make_view_batch(x: np.ndarray, num_views: int, policy: ViewPolicy | None, rng) -> ViewBatch:
    """Generate ``num_views`` augmented copies of every row of x."""
    if num_views < 2:
        raise ValueError("need at least 2 views")
    policy = policy or ViewPolicy()
    gen = as_rng(rng)
    n = x.shape[0]
    out = ViewBatch([])
    for v in range(num_views):
        heavy = v >= policy.num_standard
        cur = x
        applied, severity = {}, {}
        for kind in PIPELINE_ORDER:
            if heavy and kind == "mask":
                on = np.ones(n, dtype=bool)
                sev = gen.uniform(policy.heavy_min, policy.heavy_max, n)
            else:
                on = gen.random(n) < policy.p_apply
                sev = gen.uniform(0.0, policy.standard_max, n)
            sev = np.where(on, sev, 0.0)
            cur = augment_batch(cur, kind, sev, gen, policy.noise_scale)
            applied[kind], severity[kind] = on, sev
        out.views.append(cur)
        out.applied.append(applied)
        out.severity.append(severity)
    return out


@dataclass
class ViewSet:
    views: list[np.ndarray]
    source: Sample
    specs: list[list[AugmentationSpec]]


def make_viewset(sample: Sample, num_views: int, policy: ViewPolicy | None, rng) -> ViewSet:
    vb = make_view_batch(sample.features[None, :], num_views, policy, rng)
    return ViewSet([v[0] for v in vb.views], sample, [vb.specs(v, 0) for v in range(num_views)])


# serialization


def _split_header(ds: Dataset, name: str) -> dict:
    s = ds[name]
    return {
        "format": "visimsiam-dataset",
        "version": DATA_VERSION,
        "split": name,
        "config": ds.config.to_dict(),
        "count": len(s),
        "dim": int(s.features.shape[1]),
        "ambiguous_count": int(s.ambiguous.sum()),
        "prototypes": ds.prototypes.tolist(),
    }


def save_dataset(ds: Dataset, directory, csv_export: bool = True) -> list[Path]:
    """Write one binary file per split (plus CSV copies); returns the paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in SPLITS:
        s = ds[name]
        raw = json.dumps(_split_header(ds, name), sort_keys=True).encode()
        path = directory / f"{name}.bin"
        with open(path, "wb") as fh:
            fh.write(DATA_MAGIC)
            fh.write(struct.pack("<IQ", DATA_VERSION, len(raw)))
            fh.write(raw)
            fh.write(np.ascontiguousarray(s.features, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(s.labels, dtype="<i8").tobytes())
            fh.write(np.ascontiguousarray(s.ambiguous, dtype="u1").tobytes())
            fh.write(np.ascontiguousarray(s.partner, dtype="<i8").tobytes())
        paths.append(path)
        if csv_export:
            cpath = directory / f"{name}.csv"
            with open(cpath, "w", newline="") as fh:
                w = csv.writer(fh)
                dim = s.features.shape[1]
                w.writerow(["label", "ambiguous", "mix_partner", *(f"x{i}" for i in range(dim))])
                for i in range(len(s)):
                    w.writerow([int(s.labels[i]), int(s.ambiguous[i]), int(s.partner[i]), *(repr(float(v)) for v in s.features[i])])
            paths.append(cpath)
    return paths


def load_split(path) -> tuple[Split, dict]:
    blob = Path(path).read_bytes()
    if blob[:8] != DATA_MAGIC:
        raise ConfigError(f"{path}: not a dataset file")
    version, hlen = struct.unpack_from("<IQ", blob, 8)
    if version != DATA_VERSION:
        raise ConfigError(f"{path}: unsupported dataset version {version}")
    off = 8 + struct.calcsize("<IQ")
    header = json.loads(blob[off : off + hlen])
    off += hlen
    n, dim = header["count"], header["dim"]
    feats = np.frombuffer(blob, "<f8", n * dim, off).reshape(n, dim).astype(np.float64)
    off += 8 * n * dim
    labels = np.frombuffer(blob, "<i8", n, off).astype(np.int64)
    off += 8 * n
    amb = np.frombuffer(blob, "u1", n, off).astype(bool)
    off += n
    partner = np.frombuffer(blob, "<i8", n, off).astype(np.int64)
    return Split(feats, labels, amb, partner), header


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    splits, header = {}, None
    for name in SPLITS:
        splits[name], header = load_split(directory / f"{name}.bin")
    return Dataset(SynthConfig(**header["config"]), np.asarray(header["prototypes"]), splits)
