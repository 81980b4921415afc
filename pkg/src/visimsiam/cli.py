"""Command-line entry point.

Every command resolves its configuration (built-in defaults, then the
``--config`` file, then flags), writes into a run directory named after a
hash of (command, resolved config, seed) and records a manifest there.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import io
import json
import logging
import math
import os
import sys
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    AnalysisError,
    ProbeConfig,
    correctness_kappa_analysis,
    kappa_by_augmentation,
    kappa_statistics,
    linear_probe,
    loss_surface_grid,
    project_2d,
)
from .data import SynthConfig, generate_dataset, load_dataset, save_dataset
from .model import load_checkpoint
from .train import TrainConfig, eval_features, train_run

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("visimsiam")

COMMANDS = ("gen-data", "train", "probe", "analyze", "loss-surface", "selftest")
MANIFEST_NAME = "manifest.json"
LOCK_NAME = ".lock"


class UsageError(Exception):
    pass


class ManifestError(ValueError):
    pass


# config resolution


def _defaults(command: str) -> dict:
    train = TrainConfig().to_dict()
    if command == "gen-data":
        return {"data": SynthConfig().to_dict()}
    if command == "train":
        return {"data": SynthConfig().to_dict(), "data_dir": None, "train": train}
    if command == "probe":
        return {"checkpoint": None, "data_dir": None, "probe": asdict(ProbeConfig())}
    if command == "analyze":
        return {
            "checkpoint": None,
            "data_dir": None,
            "probe": asdict(ProbeConfig()),
            "analysis": {"split": "train", "views_per_sample": 8, "augmentation_repeats": 1},
        }
    if command == "loss-surface":
        return {"dim": 16, "kappas": [0.01, 0.1, 1.0, 10.0, 100.0], "s_min": -0.9, "s_max": 0.99, "s_points": 50}
    if command == "selftest":
        return {"seeds": [0, 1, 2]}
    raise UsageError(f"unknown command {command!r}")


@dataclass
class Flag:
    name: str
    key: str
    type: type = str
    help: str = ""


_TRAIN_FLAGS = [
    Flag("--loss", "train.loss", str, "simsiam | vmf-const | vi-simsiam"),
    Flag("--epochs", "train.epochs", int),
    Flag("--batch-size", "train.batch_size", int),
    Flag("--lr", "train.base_lr", float),
    Flag("--momentum", "train.momentum", float),
    Flag("--weight-decay", "train.weight_decay", float),
    Flag("--num-views", "train.num_views", int),
    Flag("--pairing", "train.pairing", str, "standard | all | multicrop"),
    Flag("--const-kappa", "train.const_kappa", float),
    Flag("--stop-gradient", "train.stop_gradient", bool),
    Flag("--predictor", "train.use_predictor", bool),
    Flag("--checkpoint-every", "train.checkpoint_every", int),
    Flag("--data-dir", "data_dir", str, "dataset directory written by gen-data"),
]
_DATA_FLAGS = [
    Flag("--num-classes", "data.num_classes", int),
    Flag("--input-dim", "data.input_dim", int),
    Flag("--samples-per-class", "data.samples_per_class", int),
    Flag("--ambiguity-fraction", "data.ambiguity_fraction", float),
    Flag("--ambiguity-mix", "data.ambiguity_mix", float),
    Flag("--noise-scale", "data.noise_scale", float),
]
_PROBE_FLAGS = [
    Flag("--checkpoint", "checkpoint", str),
    Flag("--data-dir", "data_dir", str),
    Flag("--probe-epochs", "probe.epochs", int),
    Flag("--probe-lr", "probe.lr", float),
]
FLAGS = {
    "gen-data": _DATA_FLAGS,
    "train": _DATA_FLAGS + _TRAIN_FLAGS,
    "probe": _PROBE_FLAGS,
    "analyze": _PROBE_FLAGS
    + [
        Flag("--split", "analysis.split", str, "train | val | test"),
        Flag("--views-per-sample", "analysis.views_per_sample", int),
    ],
    "loss-surface": [
        Flag("--dim", "dim", int),
        Flag("--kappas", "kappas", str, "comma-separated list"),
        Flag("--s-points", "s_points", int),
    ],
    "selftest": [],
}

# where --seed lands in each command's config
SEED_KEYS = {
    "gen-data": ["data.seed"],
    "train": ["data.seed", "train.seed"],
    "probe": ["probe.seed"],
    "analyze": ["probe.seed"],
    "loss-surface": [],
    "selftest": [],
}


def _set(cfg: dict, key: str, value) -> None:
    *path, last = key.split(".")
    node = cfg
    for p in path:
        node = node.setdefault(p, {})
    node[last] = value


def _get(cfg: dict, key: str):
    node = cfg
    for p in key.split("."):
        node = node[p]
    return node


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = dict(base)
    for k, v in override.items():
        if k not in base:
            raise UsageError(f"unknown config key {where + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def read_config_file(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        if p.suffix == ".toml":
            return tomllib.loads(p.read_text())
        if p.suffix == ".json":
            return json.loads(p.read_text())
    except (ValueError, tomllib.TOMLDecodeError) as e:
        raise UsageError(f"cannot parse config file {p}: {e}") from e
    raise UsageError(f"config file must end in .toml or .json: {p}")


def resolve_config(command: str, file_cfg: dict | None, flags: dict, seed: int | None) -> tuple[dict, int]:
    """Precedence: flag > config file > built-in default."""
    cfg = _defaults(command)
    file_cfg = dict(file_cfg or {})
    file_seed = file_cfg.pop("seed", None)
    # one file may serve several commands; sections of other commands are skipped
    known = set().union(*(_defaults(c) for c in COMMANDS))
    file_cfg = {k: v for k, v in file_cfg.items() if k in cfg or k not in known}
    cfg = _merge(cfg, file_cfg)
    for key, value in flags.items():
        _set(cfg, key, value)
    if seed is None:
        seed = file_seed
    keys = SEED_KEYS[command]
    if seed is None:
        # no global seed: per-component seeds stay as resolved
        return cfg, int(_get(cfg, keys[0])) if keys else 0
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise UsageError("--seed must be an unsigned 64-bit integer")
    for key in keys:
        _set(cfg, key, seed)
    return cfg, seed


def config_hash(command: str, cfg: dict, seed: int) -> str:
    blob = json.dumps({"command": command, "config": cfg, "seed": seed}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


# manifests and run directories


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    artifacts: list[str] = field(default_factory=list)
    tool_version: str = __version__
    started: str = ""
    finished: str | None = None
    status: str = "running"
    wall_time: float | None = None


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def write_manifest(manifest: RunManifest, run_dir) -> Path:
    path = Path(run_dir) / MANIFEST_NAME
    _atomic_write(path, json.dumps(asdict(manifest), indent=1, sort_keys=True) + "\n")
    return path


def load_manifest(path) -> RunManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        raw = json.loads(path.read_text())
        m = RunManifest(**raw)
    except FileNotFoundError:
        raise
    except (ValueError, TypeError) as e:
        raise ManifestError(f"corrupt manifest {path}: {e}") from e
    if m.command not in COMMANDS or not isinstance(m.config, dict):
        raise ManifestError(f"corrupt manifest {path}: bad command or config")
    if m.tool_version != __version__:
        warnings.warn(
            f"manifest {path} was written by version {m.tool_version}, this is {__version__}",
            stacklevel=2,
        )
    return m


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class RunLock:
    """Exclusive lock file inside a run directory."""

    def __init__(self, run_dir: Path):
        self.path = run_dir / LOCK_NAME

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(f"run directory is locked by another process: {self.path}") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def _prepare_run_dir(out: Path, command: str, cfg: dict, seed: int, force: bool) -> Path:
    run_dir = out / f"{command}-{config_hash(command, cfg, seed)}"
    if run_dir.exists():
        if (run_dir / LOCK_NAME).exists():
            raise RuntimeError(f"run directory is locked by another process: {run_dir / LOCK_NAME}")
        if not force:
            raise UsageError(f"run directory {run_dir} already exists (use --force to overwrite)")
        for p in sorted(run_dir.rglob("*"), reverse=True):
            p.rmdir() if p.is_dir() else p.unlink()
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


# CSV helpers


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_csv(path: Path, header: list[str], rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    _atomic_write(path, buf.getvalue())


def write_json(path: Path, obj) -> None:
    _atomic_write(path, json.dumps(obj, indent=1, sort_keys=True, default=_fmt) + "\n")


# commands


def _require_path(cfg: dict, key: str) -> Path:
    value = cfg.get(key)
    if not value:
        raise UsageError(f"--{key.replace('_', '-')} is required")
    p = Path(value)
    if not p.exists():
        raise FileNotFoundError(f"{key.replace('_', ' ')} not found: {p}")
    return p


def cmd_gen_data(cfg: dict, run_dir: Path) -> None:
    ds = generate_dataset(SynthConfig(**cfg["data"]))
    save_dataset(ds, run_dir)


def cmd_train(cfg: dict, run_dir: Path) -> None:
    tc = TrainConfig.from_dict(cfg["train"])
    if cfg.get("data_dir"):
        data = load_dataset(_require_path(cfg, "data_dir"))
    else:
        data = generate_dataset(SynthConfig(**cfg["data"]))
    train_run(tc, data, run_dir)


def _probe_and_project(cfg: dict, run_dir: Path):
    store, _ = load_checkpoint(_require_path(cfg, "checkpoint"))
    ds = load_dataset(_require_path(cfg, "data_dir"))
    if ds.config.input_dim != store.config.input_dim:
        raise UsageError("dataset dimension does not match the checkpoint")
    probe = linear_probe(store, ds, ProbeConfig(**cfg["probe"]))
    test = ds["test"]
    z, _ = eval_features(store, test.features)
    proj = project_2d(z)
    write_csv(
        run_dir / "projection.csv",
        ["index", "pc1", "pc2", "label", "ambiguous"],
        ((i, *proj.coords[i], test.labels[i], test.ambiguous[i]) for i in range(len(test))),
    )
    return store, ds, probe


def _probe_summary(probe) -> dict:
    return {
        "top1": probe.top1,
        "top5": probe.top5,
        "val_top1": probe.val_top1,
        "best_epoch": probe.best_epoch,
        "num_test": int(probe.correct.size),
    }


def cmd_probe(cfg: dict, run_dir: Path) -> None:
    _, ds, probe = _probe_and_project(cfg, run_dir)
    write_json(run_dir / "probe.json", _probe_summary(probe))
    test = ds["test"]
    write_csv(
        run_dir / "correctness.csv",
        ["index", "label", "ambiguous", "correct"],
        ((i, test.labels[i], test.ambiguous[i], probe.correct[i]) for i in range(len(test))),
    )


def _box_rows(group_type: str, groups: dict):
    keys = ("n", "mean", "std", "min", "q1", "median", "q3", "max", "outliers")
    for name, st in groups.items():
        yield (group_type, name, *(st.get(k, "") for k in keys))


BOX_HEADER = ["group_type", "group", "n", "mean", "std", "min", "q1", "median", "q3", "max", "outliers"]


def _welch(res):
    return None if res is None else {"t": res.t, "dof": res.dof, "p": res.p}


def cmd_analyze(cfg: dict, run_dir: Path) -> None:
    store, ds, probe = _probe_and_project(cfg, run_dir)
    if not store.config.kappa_head:
        raise AnalysisError("checkpoint has no kappa head (not a vi-simsiam model)")
    acfg = cfg["analysis"]
    seed = cfg["probe"]["seed"]
    if acfg["split"] not in ("train", "val", "test"):
        raise UsageError("--split must be train, val or test")
    split = ds[acfg["split"]]
    rep = kappa_statistics(store, split, acfg["views_per_sample"], seed)
    write_csv(
        run_dir / "kappa_per_sample.csv",
        ["index", "label", "ambiguous", "kappa"],
        ((i, split.labels[i], split.ambiguous[i], rep.per_sample[i]) for i in range(len(split))),
    )
    test_rep = kappa_statistics(store, ds["test"], acfg["views_per_sample"], seed)
    corr = correctness_kappa_analysis(probe.correct, test_rep.per_sample)
    aug = kappa_by_augmentation(store, ds["test"], acfg["augmentation_repeats"], seed)
    rows = [
        *_box_rows("class", {str(k): v for k, v in rep.by_class.items()}),
        *_box_rows("ambiguity", rep.by_ambiguity),
        *_box_rows("view_type", rep.by_view_type),
        *_box_rows("augmentation", aug.stats),
        *_box_rows("probe", {"correct": corr.correct, "incorrect": corr.incorrect}),
    ]
    write_csv(run_dir / "kappa_groups.csv", BOX_HEADER, rows)
    ratio = aug.variance_ratio("mask", "noise") if aug.stats["noise"].get("var") else math.nan
    summary = {
        "probe": _probe_summary(probe),
        "kappa": {"split": acfg["split"], **rep.summary},
        "ambiguity_test": _welch(rep.ambiguity_test),
        "correctness_test": _welch(corr.test),
        "correctness_applicable": corr.applicable,
        "correctness_note": corr.reason,
        "augmentation_tests": {k: _welch(v) for k, v in aug.tests_vs_base.items()},
        "mask_noise_variance_ratio": ratio,
    }
    write_json(run_dir / "summary.json", summary)


def cmd_loss_surface(cfg: dict, run_dir: Path) -> None:
    kappas = cfg["kappas"]
    if isinstance(kappas, str):
        try:
            kappas = [float(k) for k in kappas.split(",") if k.strip()]
        except ValueError as e:
            raise UsageError(f"--kappas must be comma-separated numbers: {e}") from None
    s = np.linspace(cfg["s_min"], cfg["s_max"], int(cfg["s_points"]))
    rows = loss_surface_grid(int(cfg["dim"]), kappas, s)
    write_csv(run_dir / "loss_surface.csv", ["kappa", "s", "loss", "dloss_ds"], rows)


def cmd_selftest(cfg: dict, run_dir: Path) -> None:
    from .selftest import run_selftest

    results = run_selftest(cfg["seeds"])
    write_csv(run_dir / "selftest.csv", ["check", "passed", "detail"], results)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
    failed = [r[0] for r in results if not r[1]]
    if failed:
        raise RuntimeError(f"selftest failures: {', '.join(failed)}")


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "probe": cmd_probe,
    "analyze": cmd_analyze,
    "loss-surface": cmd_loss_surface,
    "selftest": cmd_selftest,
}


def execute(command: str, cfg: dict, seed: int, out: Path, force: bool = False) -> Path:
    """Run a resolved command in its run directory; returns the directory."""
    run_dir = _prepare_run_dir(out, command, cfg, seed, force)
    with RunLock(run_dir):
        manifest = RunManifest(command, cfg, seed, started=_now())
        write_manifest(manifest, run_dir)
        t0 = time.perf_counter()
        try:
            HANDLERS[command](cfg, run_dir)
        except BaseException:
            manifest.status = "failed"
            raise
        else:
            manifest.status = "ok"
        finally:
            manifest.finished = _now()
            manifest.wall_time = time.perf_counter() - t0
            skip = {MANIFEST_NAME, LOCK_NAME}
            manifest.artifacts = sorted(
                str(p.relative_to(run_dir))
                for p in run_dir.rglob("*")
                if p.is_file() and p.name not in skip and not p.name.endswith(".tmp")
            )
            write_manifest(manifest, run_dir)
    return run_dir


# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML or JSON config file")
    p.add_argument("--seed", type=int, help="unsigned 64-bit seed")
    p.add_argument("--out", default="runs", help="parent directory for run directories")
    p.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="visimsiam", description="Variational SimSiam at desk scale")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for command in COMMANDS:
        p = sub.add_parser(command)
        _add_common(p)
        for f in FLAGS[command]:
            dest = "flag:" + f.key
            if f.type is bool:
                p.add_argument(f.name, dest=dest, action=argparse.BooleanOptionalAction, default=argparse.SUPPRESS, help=f.help)
            else:
                meta = f.key.rsplit(".", 1)[-1].upper()
                p.add_argument(f.name, dest=dest, type=f.type, default=argparse.SUPPRESS, metavar=meta, help=f.help)
    rerun = sub.add_parser("rerun", help="repeat the command recorded in a manifest")
    rerun.add_argument("manifest")
    rerun.add_argument("--out", default="runs")
    rerun.add_argument("--force", action="store_true")
    rerun.add_argument("-v", "--verbose", action="store_true")
    return parser


def _resolve_args(args) -> tuple[str, dict, int]:
    if args.command == "rerun":
        try:
            m = load_manifest(args.manifest)
        except FileNotFoundError:
            raise UsageError(f"manifest not found: {args.manifest}") from None
        return m.command, m.config, m.seed
    file_cfg = read_config_file(args.config) if args.config else None
    flags = {k[5:]: v for k, v in vars(args).items() if k.startswith("flag:")}
    cfg, seed = resolve_config(args.command, file_cfg, flags, args.seed)
    # construct the typed configs now so bad values are usage errors
    try:
        if "train" in cfg:
            TrainConfig.from_dict(cfg["train"])
        if "data" in cfg:
            SynthConfig(**cfg["data"])
        if "probe" in cfg:
            ProbeConfig(**cfg["probe"])
    except (ValueError, TypeError) as e:
        raise UsageError(f"invalid configuration: {e}") from None
    return args.command, cfg, seed


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required: " + ", ".join(COMMANDS))
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
            stream=sys.stderr,
        )
        command, cfg, seed = _resolve_args(args)
        run_dir = execute(command, cfg, seed, Path(args.out), args.force)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure: NaN loss, bad files, failed checks
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    print(run_dir)
    return 0
