"""Command-line front end.

Settings come from three layers, later ones winning: built-in defaults, the
``--config`` file (INI sections ``[sensor]``, ``[architecture]``, ``[train]``,
``[finetune]``, ``[data]``, ``[eval]``, ``[run]``), then command-line flags.
Relative ``--data``-style paths are resolved against ``$RANGECAST_DATA_ROOT``
and relative ``--out`` against ``$RANGECAST_OUTPUT_ROOT`` when those are set.

Exit codes: 0 success, 1 validation or runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import math
import os
import platform
import sys
from contextlib import nullcontext
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

log = logging.getLogger("rangecast")

DATA_ROOT_ENV = "RANGECAST_DATA_ROOT"
OUTPUT_ROOT_ENV = "RANGECAST_OUTPUT_ROOT"


class ValidationError(Exception):
    pass


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text) -> tuple[int, ...]:
    if isinstance(text, tuple):
        return text
    return tuple(int(t) for t in str(text).replace(",", " ").split())


def _opt_ints(text):
    return None if str(text).strip() in ("", "none", "None") else _ints(text)


@dataclass(frozen=True)
class Option:
    section: str
    key: str
    parse: Callable[[Any], Any]
    default: Any
    help: str

    @property
    def flag(self) -> str:
        return "--" + self.key.replace("_", "-")


def _opts(section, rows):
    return [Option(section, *row) for row in rows]


SENSOR = _opts("sensor", [
    ("height", int, 64, "range image rows"),
    ("width", int, 2048, "range image columns"),
    ("fov_up_deg", float, 3.0, "upward vertical field of view, degrees"),
    ("fov_down_deg", float, 25.0, "downward vertical field of view, degrees (positive)"),
    ("r_min", float, 1.0, "smallest predicted range, m"),
    ("r_max", float, 85.0, "largest predicted range, m"),
])
HORIZON = _opts("architecture", [
    ("past", int, 5, "number of past scans P"),
    ("future", int, 5, "number of predicted scans F"),
])
ARCH = HORIZON + _opts("architecture", [
    ("channels", _ints, "16,32,64,128", "channels per encoder stage"),
    ("height_factors", _ints, "2,2,2,2", "vertical downsampling per stage"),
    ("width_factors", _ints, "2,2,2,2", "horizontal downsampling per stage"),
    ("temporal_reductions", _ints, "1,1,1,1", "frames removed per encoder stage"),
    ("temporal_expansions", _opt_ints, "", "frames added per decoder stage (empty: mirror reductions)"),
    ("leaky_slope", float, 0.2, "negative slope of the leaky ReLU"),
    ("skip_connections", _bool, True, "concatenate encoder features into the decoder"),
    ("circular_padding", _bool, True, "wrap the image columns when padding"),
])
OPTIM = _opts("train", [
    ("lr", float, 1e-3, "initial learning rate"),
    ("decay", float, 0.99, "learning-rate factor per epoch"),
    ("accumulation", int, 16, "samples per optimizer step"),
    ("beta1", float, 0.9, "Adam beta1"),
    ("beta2", float, 0.999, "Adam beta2"),
    ("eps", float, 1e-8, "Adam epsilon"),
    ("shuffle", _bool, True, "shuffle sample order each epoch"),
])
TRAIN_PHASE = _opts("train", [
    ("epochs", int, 50, "training epochs"),
    ("mask_weight", float, 1.0, "weight of the mask loss"),
    ("chamfer_weight", float, 0.0, "weight of the Chamfer loss"),
])
FINETUNE_PHASE = _opts("finetune", [
    ("epochs", int, 10, "fine-tuning epochs"),
    ("mask_weight", float, 1.0, "weight of the mask loss"),
    ("chamfer_weight", float, 1.0, "weight of the Chamfer loss"),
])
DATA = _opts("data", [
    ("data", str, "", "scan directory (*.bin, or a velodyne/ subdirectory)"),
    ("poses", str, "", "pose file, one 3x4 row-major matrix per line"),
    ("calib", str, "", "calibration file with a Tr entry (poses become C^-1 T C)"),
])
VAL_DATA = _opts("data", [
    ("val_data", str, "", "validation scan directory"),
])
CHECKPOINT = _opts("eval", [("checkpoint", str, "", "model checkpoint (.pcfm)")])
EVAL = _opts("eval", [
    ("baseline", str, "", "identity, constvel or raytrace instead of a checkpoint"),
    ("mode", str, "full", "full, or sampled:<n> to subsample both clouds"),
])
SYNTH = _opts("synth", [
    ("scene", str, "", "scene description file; empty uses the built-in street benchmark"),
    ("scans", int, 30, "scans to generate (benchmark scene)"),
    ("ego_speed", float, 1.0, "ego speed along x, m/frame (benchmark scene)"),
    ("object_speed", float, 1.0, "moving car speed, m/frame (benchmark scene)"),
])
RUN = _opts("run", [
    ("out", str, ".", "output directory"),
    ("seed", int, 0, "random seed"),
    ("threads", int, 0, "cap on BLAS and nearest-neighbor threads (0: library default)"),
])

PATH_KEYS = {("data", "data"), ("data", "poses"), ("data", "calib"), ("data", "val_data"),
             ("eval", "checkpoint"), ("synth", "scene")}

COMMANDS: dict[str, tuple[str, list[Option]]] = {
    "synth": ("generate a synthetic scan sequence with poses", SYNTH + SENSOR + RUN),
    "project": ("write the range image of every scan", DATA + SENSOR + RUN),
    "stats": ("summarize a sequence and its normalization statistics", DATA + SENSOR + HORIZON + RUN),
    "train": ("train a model from scratch", DATA + VAL_DATA + SENSOR + ARCH + OPTIM + TRAIN_PHASE + RUN),
    "finetune": ("continue training a checkpoint with the Chamfer loss",
                 CHECKPOINT + DATA + VAL_DATA + OPTIM + FINETUNE_PHASE + RUN),
    "predict": ("write predicted clouds of a checkpoint", CHECKPOINT + DATA + RUN),
    "baseline": ("write predicted clouds of a baseline", DATA + SENSOR + HORIZON + EVAL + RUN),
    "evaluate": ("per-step Chamfer evaluation of a checkpoint or baseline",
                 DATA + SENSOR + HORIZON + CHECKPOINT + EVAL + RUN),
    "selftest": ("run gradient, round-trip and Chamfer checks", RUN),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rangecast", description="LiDAR point cloud forecasting toolkit")
    parser.add_argument("--log-level", default="INFO", help="logging level (default: INFO)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, (desc, options) in COMMANDS.items():
        p = sub.add_parser(name, help=desc, description=desc)
        p.add_argument("--config", default=None, help="INI config file; flags override it (default: none)")
        for o in options:
            shown = o.default if o.default != "" else "empty"
            text = f"{o.help} (default: {shown}; config [{o.section}] {o.key})"
            if o.parse is _bool:
                p.add_argument(o.flag, dest=o.key, default=None, action=argparse.BooleanOptionalAction, help=text)
            else:
                p.add_argument(o.flag, dest=o.key, default=None, help=text)
        if name == "predict":
            p.add_argument("--save-range-images", action="store_true",
                           help="also write masked range images (default: off)")
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict[str, dict[str, Any]]:
    """Merge defaults, config file and flags into {section: {key: value}}."""
    options = COMMANDS[command][1]
    file_cfg = configparser.ConfigParser()
    if args.config:
        if not Path(args.config).is_file():
            raise ValidationError(f"config: file not found: {args.config}")
        file_cfg.read(args.config)
        known = {(o.section, o.key) for opts in COMMANDS.values() for o in opts[1]}
        for section in file_cfg.sections():
            for key in file_cfg[section]:
                if (section, key) not in known:
                    raise ValidationError(f"config [{section}] {key}: unknown setting")
    merged: dict[str, dict[str, Any]] = {}
    for o in options:
        raw, origin = o.default, "default"
        if file_cfg.has_option(o.section, o.key):
            raw, origin = file_cfg.get(o.section, o.key), f"config [{o.section}]"
        flag_value = getattr(args, o.key, None)
        if flag_value is not None:
            raw, origin = flag_value, "flag"
        try:
            value = o.parse(raw)
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"{o.key} ({origin}): {exc}") from None
        merged.setdefault(o.section, {})[o.key] = value
    for section, key in PATH_KEYS:
        if section in merged and merged[section].get(key):
            p = Path(merged[section][key])
            if not p.is_absolute() and os.environ.get(DATA_ROOT_ENV):
                p = Path(os.environ[DATA_ROOT_ENV]) / p
            if not p.exists():
                raise ValidationError(f"{key}: path does not exist: {p}")
            merged[section][key] = str(p)
    out = Path(merged["run"]["out"])
    if not out.is_absolute() and os.environ.get(OUTPUT_ROOT_ENV):
        out = Path(os.environ[OUTPUT_ROOT_ENV]) / out
    merged["run"]["out"] = str(out)
    return merged


# ----------------------------------------------------------------------------
# builders from the merged config

def _intrinsics(cfg):
    from .range_projection import SensorIntrinsics
    s = cfg["sensor"]
    try:
        return SensorIntrinsics(s["height"], s["width"], math.radians(s["fov_up_deg"]),
                                math.radians(s["fov_down_deg"]), s["r_min"], s["r_max"])
    except ValueError as exc:
        raise ValidationError(f"sensor: {exc}") from None


def _architecture(cfg):
    from .network import ArchitectureConfig
    a = dict(cfg["architecture"])
    try:
        return ArchitectureConfig(intrinsics=_intrinsics(cfg), **a)
    except ValueError as exc:
        raise ValidationError(f"architecture: {exc}") from None


def _train_config(cfg, phase: str):
    from .trainer import Phase, TrainConfig
    o, p = cfg["train"], cfg[phase]
    try:
        return TrainConfig(lr=o["lr"], decay=o["decay"], accumulation=o["accumulation"], epochs=p["epochs"],
                           beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"], seed=cfg["run"]["seed"],
                           schedule=(Phase(0, None, p["mask_weight"], p["chamfer_weight"]),),
                           shuffle=o["shuffle"], workers=_workers(cfg))
    except ValueError as exc:
        raise ValidationError(f"train: {exc}") from None


def _workers(cfg) -> int:
    return cfg["run"]["threads"] or 1


def _dataset(cfg, key="data", past=None, future=None, need_poses=False):
    from .lidar_io import SequenceDataset, read_calib
    d = cfg["data"]
    if not d.get(key):
        raise ValidationError(f"{key}: a scan directory is required")
    if need_poses and not d.get("poses"):
        raise ValidationError("poses: a pose file is required for this command")
    calib = read_calib(d["calib"]) if d.get("calib") else None
    poses = d.get("poses") if key == "data" else None
    horizon = cfg.get("architecture", {})
    ds = SequenceDataset.from_directory(d[key], poses or None, calib,
                                        past or horizon.get("past", 5), future or horizon.get("future", 5))
    if len(ds) == 0:
        raise ValidationError(f"{key}: no .bin scans in {d[key]}")
    return ds


def _versions() -> dict:
    import scipy
    from . import __version__
    return {"rangecast": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


def write_manifest(out: Path, command: str, argv: list[str], cfg: dict, outputs: list[str]) -> None:
    manifest = {
        "command": command,
        "argv": argv,
        "seed": cfg["run"]["seed"],
        "config": cfg,
        "versions": _versions(),
        "outputs": sorted(outputs),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=list) + "\n")


def _write_clouds(out: Path, sample_id: int, clouds) -> list[str]:
    from .lidar_io import write_scan_bin
    names = []
    for k, c in enumerate(clouds, start=1):
        name = f"predictions/{sample_id:06d}_{k:02d}.bin"
        write_scan_bin(out / name, c)
        names.append(name)
    return names


# ----------------------------------------------------------------------------
# commands

def cmd_synth(cfg, out: Path) -> list[str]:
    from .lidar_io import benchmark_scene, load_scene_spec, make_synthetic_sequence, write_poses, write_scan_bin
    s = cfg["synth"]
    if s["scene"]:
        spec = load_scene_spec(s["scene"])
    else:
        spec = benchmark_scene(cfg["run"]["seed"], s["scans"], _intrinsics(cfg), s["ego_speed"], s["object_speed"])
    ds = make_synthetic_sequence(spec)
    (out / "velodyne").mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(len(ds)):
        name = f"velodyne/{i:06d}.bin"
        write_scan_bin(out / name, ds.cloud(i))
        names.append(name)
    write_poses(out / "poses.txt", ds.poses)
    log.info("wrote %d scans to %s", len(ds), out)
    return names + ["poses.txt"]


def cmd_project(cfg, out: Path) -> list[str]:
    from .range_projection import project, save_range_image
    intr = _intrinsics(cfg)
    ds = _dataset(cfg, past=1, future=1)
    (out / "range_images").mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(len(ds)):
        name = f"range_images/{i:06d}.rimg"
        save_range_image(out / name, project(ds.cloud(i), intr))
        names.append(name)
    return names


def cmd_stats(cfg, out: Path) -> list[str]:
    from .lidar_io import slice_samples
    from .network import compute_stats
    from .range_projection import project
    intr = _intrinsics(cfg)
    ds = _dataset(cfg)
    counts, images = [], []
    for i in range(len(ds)):
        c = ds.cloud(i)
        counts.append(len(c))
        images.append(project(c, intr).values)
    frames = np.stack(images)
    mean, std = compute_stats(frames)
    stats = {
        "scans": len(ds),
        "samples": len(slice_samples(ds)),
        "points_per_scan": {"mean": float(np.mean(counts)), "min": int(min(counts)), "max": int(max(counts))},
        "valid_pixel_fraction": float((frames > 0).mean()),
        "range_mean": mean,
        "range_std": std,
    }
    (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    print(json.dumps(stats, indent=2, sort_keys=True))
    return ["stats.json"]


def _samples(cfg, key, arch, start_id=0):
    from .trainer import make_training_samples
    ds = _dataset(cfg, key, arch.past, arch.future)
    samples = make_training_samples(ds, arch.intrinsics, start_id)
    if not samples:
        raise ValidationError(f"{key}: {len(ds)} scans are fewer than P+F={arch.past + arch.future}")
    return samples


def cmd_train(cfg, out: Path) -> list[str]:
    from .network import build
    from .trainer import train
    arch = _architecture(cfg)
    tcfg = _train_config(cfg, "train")
    train_samples = _samples(cfg, "data", arch)
    val_samples = _samples(cfg, "val_data", arch, 1_000_000) if cfg["data"]["val_data"] else []
    model = build(arch, cfg["run"]["seed"])
    train(model, train_samples, val_samples, tcfg, out)
    return ["metrics.csv", "best.pcfm", "last.pcfm"]


def cmd_finetune(cfg, out: Path) -> list[str]:
    from .network import load_checkpoint
    from .trainer import fine_tune
    if not cfg["eval"]["checkpoint"]:
        raise ValidationError("checkpoint: required")
    model, stats, _ = load_checkpoint(cfg["eval"]["checkpoint"])
    arch = model.config
    tcfg = _train_config(cfg, "finetune")
    train_samples = _samples(cfg, "data", arch)
    val_samples = _samples(cfg, "val_data", arch, 1_000_000) if cfg["data"]["val_data"] else []
    fine_tune((model, stats), train_samples, val_samples, tcfg, out)
    return ["finetune_metrics.csv", "finetune_best.pcfm", "finetune_last.pcfm"]


def cmd_predict(cfg, out: Path, save_images: bool = False) -> list[str]:
    from . import autodiff as ad
    from .evaluation import iter_samples
    from .network import forward, load_checkpoint
    from .range_projection import project, save_range_image, unproject
    if not cfg["eval"]["checkpoint"]:
        raise ValidationError("checkpoint: required")
    model, stats, _ = load_checkpoint(cfg["eval"]["checkpoint"])
    arch = model.config
    ds = _dataset(cfg, past=arch.past, future=arch.future)
    (out / "predictions").mkdir(parents=True, exist_ok=True)
    names = []
    for s in iter_samples(ds):
        frames = np.stack([project(c, arch.intrinsics).values for c in s.past])
        with ad.no_grad():
            pred = forward(model, frames, stats)
        valid = pred.valid
        clouds = [unproject(pred.ranges.data[t], valid[t], arch.intrinsics) for t in range(arch.future)]
        names += _write_clouds(out, s.index, clouds)
        if save_images:
            name = f"predictions/{s.index:06d}.rimg"
            save_range_image(out / name, pred.masked_ranges, arch.intrinsics)
            names.append(name)
    return names


def _baseline_kind(cfg):
    from .baselines import BaselineKind
    try:
        return BaselineKind(cfg["eval"]["baseline"])
    except ValueError:
        raise ValidationError(f"baseline: expected one of identity, constvel, raytrace, "
                              f"got {cfg['eval']['baseline']!r}") from None


def cmd_baseline(cfg, out: Path) -> list[str]:
    from .baselines import BaselineKind
    from .evaluation import baseline_predictor, iter_samples
    kind = _baseline_kind(cfg)
    intr = _intrinsics(cfg)
    ds = _dataset(cfg, need_poses=kind is not BaselineKind.IDENTITY)
    predictor = baseline_predictor(kind, ds.future, intr)
    (out / "predictions").mkdir(parents=True, exist_ok=True)
    names = []
    for s in iter_samples(ds):
        names += _write_clouds(out, s.index, predictor(s))
    return names


def cmd_evaluate(cfg, out: Path) -> list[str]:
    from .baselines import BaselineKind
    from .evaluation import (baseline_predictor, evaluate, iter_samples, model_predictor, time_prediction,
                             write_boxplot_csv, write_per_sample_csv, write_summary_csv)
    from .network import load_checkpoint
    e = cfg["eval"]
    if bool(e["checkpoint"]) == bool(e["baseline"]):
        raise ValidationError("checkpoint/baseline: give exactly one of --checkpoint or --baseline")
    if e["checkpoint"]:
        model, stats, _ = load_checkpoint(e["checkpoint"])
        ds = _dataset(cfg, past=model.config.past, future=model.config.future)
        predictor = model_predictor(model, stats)
    else:
        kind = _baseline_kind(cfg)
        ds = _dataset(cfg, need_poses=kind is not BaselineKind.IDENTITY)
        predictor = baseline_predictor(kind, ds.future, _intrinsics(cfg))
    try:
        report = evaluate(predictor, ds, e["mode"], seed=cfg["run"]["seed"], workers=_workers(cfg))
    except ValueError as exc:
        raise ValidationError(f"evaluate: {exc}") from None
    write_per_sample_csv(out / "per_sample.csv", report)
    write_summary_csv(out / "summary.csv", report)
    write_boxplot_csv(out / "boxplot.csv", report)
    timing = time_prediction(predictor, next(iter_samples(ds)), repeats=3)
    (out / "timing.json").write_text(json.dumps(
        {"median_ms": timing.median_ms, "raw_ms": list(timing.raw_ms)}, indent=2) + "\n")
    for k, s in enumerate(report.per_step, start=1):
        print(f"step {k}: mean {s.mean:.4f} m^2 (std {s.std:.4f}, median {s.median:.4f}, n={s.count})")
    print(f"all: mean {report.overall.mean:.4f} m^2, flagged samples {len(report.flagged)}")
    return ["per_sample.csv", "summary.csv", "boxplot.csv", "timing.json"]


def cmd_selftest(cfg, out: Path | None) -> tuple[list[str], bool]:
    from .selftest import run_selftest
    ok = True
    for name, passed, detail in run_selftest(cfg["run"]["seed"]):
        print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
        ok &= passed
    return [], ok


def _thread_limit(cfg):
    n = cfg["run"]["threads"]
    if n <= 0:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    command = args.command
    try:
        cfg = resolve(command, args)
        out = Path(cfg["run"]["out"])
        with _thread_limit(cfg):
            if command == "selftest":
                _, ok = cmd_selftest(cfg, out)
                return 0 if ok else 1
            out.mkdir(parents=True, exist_ok=True)
            handler = {"synth": cmd_synth, "project": cmd_project, "stats": cmd_stats, "train": cmd_train,
                       "finetune": cmd_finetune, "baseline": cmd_baseline, "evaluate": cmd_evaluate}
            if command == "predict":
                outputs = cmd_predict(cfg, out, args.save_range_images)
            else:
                outputs = handler[command](cfg, out)
            write_manifest(out, command, argv, cfg, outputs)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0
