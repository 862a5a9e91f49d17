"""Per-step Chamfer evaluation, summary statistics, CSV reports and timing."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from . import baselines
from .lidar_io import PoseSE3, SequenceDataset, as_cloud, slice_samples
from .losses import chamfer
from .network import ForecastModel, predict_clouds
from .range_projection import SensorIntrinsics, project

log = logging.getLogger(__name__)


@dataclass
class Sample:
    index: int
    past: list[np.ndarray]
    future: list[np.ndarray]
    past_poses: list[PoseSE3] | None = None


Predictor = Callable[[Sample], Sequence[np.ndarray]]


def iter_samples(ds: SequenceDataset) -> Iterator[Sample]:
    for k, (past, fut) in enumerate(slice_samples(ds)):
        yield Sample(
            k,
            [ds.cloud(i) for i in past],
            [ds.cloud(i) for i in fut],
            None if ds.poses is None else [ds.poses[i] for i in past],
        )


def baseline_predictor(kind: baselines.BaselineKind | str, future: int, intr: SensorIntrinsics) -> Predictor:
    kind = baselines.BaselineKind(kind)
    return lambda s: baselines.predict(kind, s.past, s.past_poses, future, intr)


def model_predictor(model: ForecastModel, stats: tuple[float, float]) -> Predictor:
    intr = model.config.intrinsics

    def run(s: Sample):
        frames = np.stack([project(c, intr).values for c in s.past])
        return predict_clouds(model, frames, stats)
    return run


def passthrough_predictor(s: Sample) -> list[np.ndarray]:
    """Returns the ground truth; a perfect predictor for sanity checks."""
    return [c.copy() for c in s.future]


def sample_cloud(cloud: np.ndarray, n: int, seed: int | Sequence[int]) -> np.ndarray:
    """Uniform subset without replacement of size min(n, |cloud|)."""
    if n < 1:
        raise ValueError(f"sample size must be >= 1, got {n}")
    cloud = as_cloud(cloud)
    if len(cloud) <= n:
        return cloud
    idx = np.random.default_rng(seed).choice(len(cloud), size=n, replace=False)
    return cloud[idx]


@dataclass(frozen=True)
class Summary:
    count: int
    mean: float
    std: float
    min: float
    q1: float
    median: float
    q3: float
    max: float

    @classmethod
    def of(cls, values) -> "Summary":
        v = np.asarray(values, dtype=np.float64)
        if v.size == 0:
            nan = math.nan
            return cls(0, nan, nan, nan, nan, nan, nan, nan)
        q = np.percentile(v, [0, 25, 50, 75, 100], method="linear")
        return cls(int(v.size), float(v.mean()), float(v.std()), *(float(x) for x in q))


@dataclass
class EvalReport:
    values: np.ndarray                   # (S, F) Chamfer per included sample and step, m^2
    sample_ids: list[int]
    per_step: list[Summary]
    overall: Summary
    flagged: list[int] = field(default_factory=list)
    mode: str = "full"
    times_ms: list[float] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.per_step)

    def means(self) -> list[float]:
        return [s.mean for s in self.per_step]


def _parse_mode(mode) -> int | None:
    if mode in ("full", None):
        return None
    if isinstance(mode, int):
        n = mode
    elif isinstance(mode, str) and mode.startswith("sampled"):
        n = int(mode.split(":", 1)[1]) if ":" in mode else 32768
    elif isinstance(mode, tuple) and mode[0] == "sampled":
        n = int(mode[1])
    else:
        raise ValueError(f"mode must be 'full', 'sampled:<n>' or ('sampled', n), got {mode!r}")
    if n < 1:
        raise ValueError(f"sampled mode needs n >= 1, got {n}")
    return n


def evaluate(predictor: Predictor, samples: SequenceDataset | Sequence[Sample], mode="full",
             seed: int = 0, workers: int = 1) -> EvalReport:
    """Chamfer distance per (sample, step) and its aggregates.

    In sampled mode prediction and ground truth are each reduced to ``n`` points
    with the same seed per (sample, step). A sample with an empty predicted or
    ground-truth cloud at any step is flagged and left out of the statistics.
    """
    n = _parse_mode(mode)
    if isinstance(samples, SequenceDataset):
        samples = iter_samples(samples)
    rows, ids, flagged, times = [], [], [], []
    steps = None
    for s in samples:
        t0 = time.perf_counter()
        pred = list(predictor(s))
        times.append((time.perf_counter() - t0) * 1e3)
        if len(pred) != len(s.future):
            raise ValueError(f"sample {s.index}: predictor returned {len(pred)} steps, expected {len(s.future)}")
        steps = len(pred)
        row = []
        for k, (p, g) in enumerate(zip(pred, s.future), start=1):
            p, g = as_cloud(p), as_cloud(g)
            if len(p) == 0 or len(g) == 0:
                log.warning("sample %d step %d: empty %s cloud, sample excluded",
                            s.index, k, "predicted" if len(p) == 0 else "ground-truth")
                row = None
                break
            if n is not None:
                p = sample_cloud(p, n, (seed, s.index, k))
                g = sample_cloud(g, n, (seed, s.index, k))
            row.append(chamfer(p, g, workers))
        if row is None:
            flagged.append(s.index)
        else:
            rows.append(row)
            ids.append(s.index)
    if steps is None:
        raise ValueError("no samples to evaluate")
    values = np.asarray(rows, dtype=np.float64).reshape(len(rows), steps)
    return EvalReport(
        values, ids,
        [Summary.of(values[:, k]) for k in range(steps)],
        Summary.of(values.ravel()),
        flagged,
        "full" if n is None else f"sampled:{n}",
        times,
    )


SUMMARY_FIELDS = ["step", "count", "mean", "std", "min", "q1", "median", "q3", "max"]


def write_per_sample_csv(path, report: EvalReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "step", "chamfer_m2"])
        for sid, row in zip(report.sample_ids, report.values):
            for k, v in enumerate(row, start=1):
                w.writerow([sid, k, repr(float(v))])


def write_summary_csv(path, report: EvalReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_FIELDS + ["flagged"])
        entries = [(str(k), s) for k, s in enumerate(report.per_step, start=1)] + [("all", report.overall)]
        for label, s in entries:
            w.writerow([label, s.count] + [repr(getattr(s, f)) for f in SUMMARY_FIELDS[2:]]
                       + [len(report.flagged)])


def write_boxplot_csv(path, report: EvalReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "min", "Q1", "median", "Q3", "max"])
        for k, s in enumerate(report.per_step, start=1):
            w.writerow([k, repr(s.min), repr(s.q1), repr(s.median), repr(s.q3), repr(s.max)])


def read_per_sample_csv(path) -> dict[tuple[int, int], float]:
    with open(path, newline="") as fh:
        return {(int(r["sample"]), int(r["step"])): float(r["chamfer_m2"]) for r in csv.DictReader(fh)}


@dataclass(frozen=True)
class Timing:
    median_ms: float
    raw_ms: tuple[float, ...]


def time_prediction(predictor: Predictor, sample: Sample, repeats: int = 3) -> Timing:
    """Median wall-clock of ``repeats`` predictions after one warm-up call."""
    if repeats < 3:
        raise ValueError(f"repeats must be >= 3, got {repeats}")
    predictor(sample)
    raw = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        predictor(sample)
        raw.append((time.perf_counter() - t0) * 1e3)
    return Timing(float(np.median(raw)), tuple(raw))
