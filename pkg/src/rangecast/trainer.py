"""Adam with gradient accumulation, per-epoch decay, a loss-weight schedule and checkpoints."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .lidar_io import SequenceDataset, slice_samples
from .losses import LossReport, LossWeights, total_loss
from .network import ArchitectureConfig, ForecastModel, compute_stats, forward, load_checkpoint, save_checkpoint
from .range_projection import SensorIntrinsics, project

log = logging.getLogger(__name__)

METRIC_FIELDS = ["epoch", "split", "L_R", "L_M", "L_CD", "total", "lr"]


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Phase:
    """Loss weights for epochs ``start <= e < stop`` (``stop=None`` is open ended)."""

    start: int
    stop: int | None
    mask: float = 1.0
    chamfer: float = 0.0


PRETRAIN = (Phase(0, None, 1.0, 0.0),)
FINETUNE = (Phase(0, None, 1.0, 1.0),)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    decay: float = 0.99
    accumulation: int = 16
    epochs: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    schedule: tuple[Phase, ...] = PRETRAIN
    shuffle: bool = True
    val_chamfer: bool = True
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "schedule", tuple(
            p if isinstance(p, Phase) else Phase(*p) for p in self.schedule))
        self.validate()

    def validate(self) -> None:
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not 0 < self.decay <= 1:
            raise ValueError(f"decay must be in (0, 1], got {self.decay}")
        if self.accumulation < 1:
            raise ValueError(f"accumulation must be >= 1, got {self.accumulation}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"Adam betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")
        if not self.eps > 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")
        if not self.schedule:
            raise ValueError("schedule must have at least one phase")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.decay ** epoch

    def weights_at(self, epoch: int) -> LossWeights:
        for p in self.schedule:
            if epoch >= p.start and (p.stop is None or epoch < p.stop):
                return LossWeights(p.mask, p.chamfer)
        raise ValueError(f"schedule does not cover epoch {epoch}")

    def replace(self, **kw) -> "TrainConfig":
        d = asdict(self)
        d["schedule"] = self.schedule
        d.update(kw)
        return TrainConfig(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = [list(asdict(p).values()) for p in self.schedule]
        return d


# ----------------------------------------------------------------------------
# data

@dataclass
class TrainingSample:
    id: int
    frames: np.ndarray   # (P, H, W) float32
    target: np.ndarray   # (F, H, W) float32


def make_training_samples(ds: SequenceDataset, intr: SensorIntrinsics,
                          start_id: int = 0) -> list[TrainingSample]:
    """Project every scan once and cut it into (past, future) windows."""
    windows = slice_samples(ds)
    images: dict[int, np.ndarray] = {}

    def image(i):
        if i not in images:
            images[i] = project(ds.cloud(i), intr).values
        return images[i]

    out = []
    for k, (past, fut) in enumerate(windows):
        out.append(TrainingSample(start_id + k, np.stack([image(i) for i in past]),
                                  np.stack([image(i) for i in fut])))
    return out


def sample_stats(samples: Sequence[TrainingSample]) -> tuple[float, float]:
    if not samples:
        raise ValueError("cannot compute normalization statistics from zero samples")
    return compute_stats(np.stack([s.frames for s in samples]))


# ----------------------------------------------------------------------------
# optimizer

def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], m: Sequence[np.ndarray],
              v: Sequence[np.ndarray], lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, t: int = 1) -> None:
    """Bias-corrected Adam, in place. Moments are float64."""
    if t < 1:
        raise ValueError(f"Adam step count must be >= 1, got {t}")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, mi, vi in zip(params, grads, m, v):
        g = np.asarray(g, dtype=np.float64)
        mi *= beta1
        mi += (1 - beta1) * g
        vi *= beta2
        vi += (1 - beta2) * g * g
        update = lr * (mi / c1) / (np.sqrt(vi / c2) + eps)
        p[...] = (p.astype(np.float64) - update).astype(p.dtype)


@dataclass
class TrainState:
    model: ForecastModel
    stats: tuple[float, float]
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    epoch: int = 0
    step: int = 0
    best_val: float = math.inf
    history: list[dict] = field(default_factory=list)

    def __post_init__(self):
        params = self.model.parameters()
        if not self.m:
            self.m = [np.zeros(p.shape) for p in params]
            self.v = [np.zeros(p.shape) for p in params]
        for p, mi, vi in zip(params, self.m, self.v):
            if mi.shape != p.shape or vi.shape != p.shape:
                raise ValueError(f"moment shape {mi.shape} does not match parameter shape {p.shape}")

    def apply_accumulated(self, count: int, lr: float, cfg: TrainConfig) -> None:
        """Adam step on the mean of ``count`` accumulated gradients, then zero them."""
        params = self.model.parameters()
        grads = [np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64) / count
                 for p in params]
        self.step += 1
        adam_step([p.data for p in params], grads, self.m, self.v, lr,
                  cfg.beta1, cfg.beta2, cfg.eps, self.step)
        self.model.zero_grad()


# ----------------------------------------------------------------------------
# loop

def _mean_report(reports: Sequence[LossReport]) -> dict:
    def mean(vals):
        vals = [x for x in vals if not math.isnan(x)]
        return float(np.mean(vals)) if vals else float("nan")
    return {
        "L_R": mean([r.range_sum for r in reports]),
        "L_M": mean([r.mask_sum for r in reports]),
        "L_CD": mean([r.chamfer_sum if not all(np.isnan(r.chamfer)) else math.nan for r in reports]),
        "total": mean([r.total for r in reports]),
    }


def evaluate_loss(model: ForecastModel, samples: Sequence[TrainingSample], stats, weights: LossWeights,
                  chamfer: bool = True, workers: int = 1) -> dict:
    """Eval-mode mean loss terms over ``samples`` (no gradient)."""
    reports = []
    intr = model.config.intrinsics
    with ad.no_grad():
        for s in samples:
            pred = forward(model, s.frames, stats, "eval")
            _, rep = total_loss(pred, s.target, weights, intr, compute_chamfer=chamfer, workers=workers)
            reports.append(rep)
    return _mean_report(reports)


def write_metrics(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in METRIC_FIELDS})


def train(model: ForecastModel, train_samples: Sequence[TrainingSample],
          val_samples: Sequence[TrainingSample], cfg: TrainConfig, out_dir=None,
          stats: tuple[float, float] | None = None, state: TrainState | None = None,
          tag: str = "") -> TrainState:
    """Run ``cfg.epochs`` epochs. Writes metrics.csv, best and last checkpoints to ``out_dir``."""
    if not train_samples:
        raise ValueError("training set is empty")
    cfg_arch = model.config
    for s in list(train_samples) + list(val_samples):
        if s.frames.shape[0] != cfg_arch.past or s.target.shape[0] != cfg_arch.future:
            raise ValueError(f"sample {s.id}: P={s.frames.shape[0]}, F={s.target.shape[0]} "
                             f"but model expects P={cfg_arch.past}, F={cfg_arch.future}")
    if state is None:
        state = TrainState(model, stats if stats is not None else sample_stats(train_samples))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    intr = cfg_arch.intrinsics
    prefix = f"{tag}_" if tag else ""

    model.zero_grad()
    for epoch in range(state.epoch, state.epoch + cfg.epochs):
        lr = cfg.lr_at(epoch)
        weights = cfg.weights_at(epoch)
        order = np.arange(len(train_samples))
        if cfg.shuffle:
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_samples))
        reports, pending = [], 0
        for idx in order:
            s = train_samples[idx]
            try:
                pred = forward(model, s.frames, state.stats, "train")
                loss, rep = total_loss(pred, s.target, weights, intr, workers=cfg.workers)
                if not np.isfinite(loss.data):
                    raise ad.NonFiniteError(f"loss is {float(loss.data)}")
                loss.backward()
            except ad.NonFiniteError as exc:
                raise TrainingError(f"non-finite value while training on sample {s.id} "
                                    f"(epoch {epoch}): {exc}") from exc
            reports.append(rep)
            pending += 1
            if pending == cfg.accumulation:
                state.apply_accumulated(pending, lr, cfg)
                pending = 0
        if pending:
            state.apply_accumulated(pending, lr, cfg)
        row = {"epoch": epoch, "split": "train", "lr": lr, **_mean_report(reports)}
        state.history.append(row)
        if val_samples:
            val = evaluate_loss(model, val_samples, state.stats, weights, cfg.val_chamfer, cfg.workers)
            state.history.append({"epoch": epoch, "split": "val", "lr": lr, **val})
            score = val["total"]
        else:
            score = row["total"]
        log.info("epoch %d lr %.3g train %.4f val %.4f", epoch, lr, row["total"], score)
        if out is not None and score < state.best_val:
            save_checkpoint(out / f"{prefix}best.pcfm", model, state.stats, {"epoch": epoch, "score": score})
        state.best_val = min(state.best_val, score)
        if out is not None:
            write_metrics(out / f"{prefix}metrics.csv", state.history)
    state.epoch += cfg.epochs
    if out is not None:
        save_checkpoint(out / f"{prefix}last.pcfm", model, state.stats, {"epoch": state.epoch})
        write_metrics(out / f"{prefix}metrics.csv", state.history)
    return state


def fine_tune(checkpoint, train_samples, val_samples, cfg: TrainConfig, out_dir=None,
              config: ArchitectureConfig | None = None) -> TrainState:
    """Continue from a checkpoint (path or ``(model, stats)``) with fresh Adam moments.

    The epoch counter restarts at 0, so the learning rate starts again at ``cfg.lr``.
    """
    if isinstance(checkpoint, (str, Path)):
        model, stats, _ = load_checkpoint(checkpoint, config)
    else:
        model, stats = checkpoint
        if config is not None and config != model.config:
            raise ValueError(f"model architecture {model.config} is incompatible with requested {config}")
    state = TrainState(model, tuple(stats))
    return train(model, train_samples, val_samples, cfg, out_dir, state=state, tag="finetune")
