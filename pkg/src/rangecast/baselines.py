"""Reference predictors: repeat the last scan, move it with constant ego velocity, or
render all past scans into each extrapolated future frame."""
from __future__ import annotations

from enum import Enum
from typing import Sequence

import numpy as np

from .lidar_io import PoseSE3, as_cloud
from .range_projection import SensorIntrinsics, project, unproject


class BaselineKind(str, Enum):
    IDENTITY = "identity"
    CONSTANT_VELOCITY = "constvel"
    RAY_TRACING = "raytrace"


def _check_past(past, future: int) -> list[np.ndarray]:
    if len(past) == 0:
        raise ValueError("baseline needs at least one past scan")
    if future < 1:
        raise ValueError(f"future must be >= 1, got {future}")
    return [as_cloud(c) for c in past]


def relative_motion(poses: Sequence[PoseSE3] | None) -> PoseSE3:
    """Sensor motion over the last frame: T_{-2}^-1 T_{-1} (poses map sensor to world)."""
    if poses is None or len(poses) < 2:
        raise ValueError("constant-velocity extrapolation needs the poses of the last two frames")
    return poses[-2].inverse() @ poses[-1]


def predict_identity(past: Sequence[np.ndarray], future: int) -> list[np.ndarray]:
    past = _check_past(past, future)
    return [past[-1].copy() for _ in range(future)]


def predict_constant_velocity(past: Sequence[np.ndarray], poses: Sequence[PoseSE3] | None, future: int,
                              rel: PoseSE3 | None = None) -> list[np.ndarray]:
    """Last scan seen from the sensor after k more frames of the last relative motion."""
    past = _check_past(past, future)
    rel = relative_motion(poses) if rel is None else rel
    return [rel.power(k).inverse().apply(past[-1]) for k in range(1, future + 1)]


def predict_ray_tracing(past: Sequence[np.ndarray], poses: Sequence[PoseSE3] | None, future: int,
                        intr: SensorIntrinsics, rel: PoseSE3 | None = None) -> list[np.ndarray]:
    """Merge every past scan in each extrapolated future frame and re-render it.

    ``poses[i]`` belongs to ``past[i]``. ``rel`` overrides the motion taken from
    the last two poses, which allows a single past frame.
    """
    past = _check_past(past, future)
    if poses is None or len(poses) != len(past):
        raise ValueError(f"ray tracing needs one pose per past scan, got "
                         f"{0 if poses is None else len(poses)} for {len(past)} scans")
    rel = relative_motion(poses) if rel is None else rel
    out = []
    for k in range(1, future + 1):
        to_future = (poses[-1] @ rel.power(k)).inverse()
        merged = np.concatenate([(to_future @ p).apply(c) for p, c in zip(poses, past)])
        out.append(unproject(project(merged, intr)))
    return out


def predict(kind: BaselineKind | str, past, poses, future: int, intr: SensorIntrinsics) -> list[np.ndarray]:
    kind = BaselineKind(kind)
    if kind is BaselineKind.IDENTITY:
        return predict_identity(past, future)
    if kind is BaselineKind.CONSTANT_VELOCITY:
        return predict_constant_velocity(past, poses, future)
    return predict_ray_tracing(past, poses, future, intr)
