"""Scan/pose file readers, sequence datasets and a ray-casting scene simulator."""
from __future__ import annotations

import configparser
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .range_projection import SensorIntrinsics, pixel_directions

log = logging.getLogger(__name__)


class FormatError(ValueError):
    pass


def as_cloud(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return np.zeros((0, 3))
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"point cloud must have shape (N, 3), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point cloud contains non-finite coordinates")
    return pts


# ----------------------------------------------------------------------------
# poses

def _rot_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def nearest_rotation(m: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


@dataclass(frozen=True)
class PoseSE3:
    """Rigid transform x -> R x + t."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "PoseSE3":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "PoseSE3":
        return cls(_rot_z(yaw), translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "PoseSE3":
        rt = self.rotation.T
        return PoseSE3(rt, -rt @ self.translation)

    def __matmul__(self, other: "PoseSE3") -> "PoseSE3":
        return PoseSE3(self.rotation @ other.rotation,
                       self.rotation @ other.translation + self.translation)

    def power(self, k: int) -> "PoseSE3":
        out = PoseSE3.identity()
        base = self if k >= 0 else self.inverse()
        for _ in range(abs(k)):
            out = out @ base
        return out

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return pts @ self.rotation.T + self.translation

    def is_valid(self, tol: float = 1e-6) -> bool:
        r = self.rotation
        return bool(np.allclose(r.T @ r, np.eye(3), atol=tol) and abs(np.linalg.det(r) - 1.0) <= tol)


# ----------------------------------------------------------------------------
# files

def read_scan_bin(path, with_intensity: bool = False):
    """Read a KITTI Velodyne scan (little-endian float32 x, y, z, intensity records)."""
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise FormatError(f"{path}: length {len(raw)} is not a multiple of 16 bytes")
    rec = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    bad = ~np.all(np.isfinite(rec), axis=1)
    if bad.any():
        raise FormatError(f"{path}: non-finite value in record {int(np.argmax(bad))}")
    pts = rec[:, :3].astype(np.float64)
    if with_intensity:
        return pts, rec[:, 3].astype(np.float64)
    return pts


def write_scan_bin(path, points, intensity=None) -> None:
    pts = as_cloud(points)
    rec = np.zeros((len(pts), 4), dtype="<f4")
    rec[:, :3] = pts
    if intensity is not None:
        rec[:, 3] = intensity
    Path(path).write_bytes(rec.tobytes())


def read_poses(path, calib=None) -> list[PoseSE3]:
    """Read a KITTI odometry pose file (12 numbers per line, row-major 3x4).

    With ``calib`` (4x4, sensor-to-camera) every pose T becomes C^-1 T C,
    i.e. it is re-expressed in the sensor frame. Default calib is identity.
    """
    c = np.eye(4) if calib is None else np.asarray(calib, dtype=np.float64)
    c_inv = np.linalg.inv(c)
    poses = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != 12:
            raise FormatError(f"{path}: line {lineno}: expected 12 numbers, got {len(tokens)}")
        try:
            vals = [float(t) for t in tokens]
        except ValueError as exc:
            raise FormatError(f"{path}: line {lineno}: {exc}") from None
        m = np.eye(4)
        m[:3, :] = np.reshape(vals, (3, 4))
        m = c_inv @ m @ c
        rot = m[:3, :3]
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-3):
            log.warning("%s: line %d: rotation not orthonormal, re-orthonormalizing", path, lineno)
            m[:3, :3] = nearest_rotation(rot)
        poses.append(PoseSE3.from_matrix(m))
    return poses


def write_poses(path, poses: Sequence[PoseSE3]) -> None:
    lines = [" ".join(repr(float(x)) for x in p.matrix()[:3, :].ravel()) for p in poses]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_calib(path) -> np.ndarray:
    """Read ``Tr`` (velodyne-to-camera) from a KITTI calib.txt as a 4x4 matrix."""
    for line in Path(path).read_text().splitlines():
        key, _, rest = line.partition(":")
        if key.strip() == "Tr":
            m = np.eye(4)
            m[:3, :] = np.reshape([float(t) for t in rest.split()], (3, 4))
            return m
    raise FormatError(f"{path}: no 'Tr' entry")


# ----------------------------------------------------------------------------
# datasets

@dataclass
class SequenceDataset:
    """Ordered scans (file paths or in-memory clouds) with optional poses."""

    scans: list
    poses: list[PoseSE3] | None = None
    past: int = 5
    future: int = 5
    labels: list[np.ndarray] | None = None

    def __post_init__(self):
        if self.past < 1 or self.future < 1:
            raise ValueError(f"past and future must be >= 1, got P={self.past}, F={self.future}")
        if self.poses is not None and len(self.poses) != len(self.scans):
            raise ValueError(f"{len(self.poses)} poses for {len(self.scans)} scans")

    def __len__(self) -> int:
        return len(self.scans)

    def cloud(self, i: int) -> np.ndarray:
        s = self.scans[i]
        if isinstance(s, (str, os.PathLike)):
            return read_scan_bin(s)
        return s

    def subset(self, start: int, stop: int) -> "SequenceDataset":
        return SequenceDataset(
            self.scans[start:stop],
            None if self.poses is None else self.poses[start:stop],
            self.past, self.future,
            None if self.labels is None else self.labels[start:stop],
        )

    @classmethod
    def from_directory(cls, directory, poses=None, calib=None, past: int = 5, future: int = 5):
        directory = Path(directory)
        scan_dir = directory / "velodyne" if (directory / "velodyne").is_dir() else directory
        scans = sorted(str(p) for p in scan_dir.glob("*.bin"))
        pose_list = read_poses(poses, calib) if poses else None
        return cls(scans, pose_list, past, future)


def slice_samples(ds: SequenceDataset) -> list[tuple[list[int], list[int]]]:
    """Windows of P past and F future scan indices, one frame apart."""
    n, p, f = len(ds), ds.past, ds.future
    if n < p + f:
        log.warning("dataset has %d scans, need at least %d for one sample", n, p + f)
        return []
    return [(list(range(i, i + p)), list(range(i + p, i + p + f))) for i in range(n - p - f + 1)]


# ----------------------------------------------------------------------------
# synthetic scenes

@dataclass
class Plane:
    """Infinite plane {x : normal . x = offset}."""

    normal: tuple = (0.0, 0.0, 1.0)
    offset: float = -1.73


@dataclass
class Box:
    """Axis-aligned box; ``velocity`` is the center displacement per frame."""

    center: tuple = (10.0, 0.0, 0.0)
    size: tuple = (2.0, 2.0, 2.0)
    velocity: tuple = (0.0, 0.0, 0.0)

    def bounds(self, frame: int):
        c = np.asarray(self.center, dtype=np.float64) + frame * np.asarray(self.velocity, dtype=np.float64)
        h = 0.5 * np.asarray(self.size, dtype=np.float64)
        return c - h, c + h


@dataclass
class EgoMotion:
    """Constant per-frame motion in the body frame: translate, then yaw."""

    velocity: tuple = (0.0, 0.0, 0.0)
    yaw_rate: float = 0.0

    def step(self) -> PoseSE3:
        return PoseSE3.from_yaw(self.yaw_rate, self.velocity)


@dataclass
class SceneSpec:
    planes: list[Plane] = field(default_factory=list)
    boxes: list[Box] = field(default_factory=list)
    ego: EgoMotion = field(default_factory=EgoMotion)
    n_scans: int = 10
    intrinsics: SensorIntrinsics = field(default_factory=SensorIntrinsics.desk)
    noise_std: float = 0.0
    seed: int = 0
    past: int = 5
    future: int = 5


def _floats(text: str) -> tuple:
    return tuple(float(t) for t in text.replace(",", " ").split())


def parse_scene_spec(text: str) -> SceneSpec:
    """Parse the key-value scene description.

    Sections: ``[scene]`` (n_scans, noise_std, seed, past, future),
    ``[sensor]`` (height, width, fov_up_deg, fov_down_deg, r_min, r_max),
    ``[ego]`` (velocity = x y z, yaw_rate_deg), and any number of
    ``[plane <name>]`` (normal, offset) and ``[box <name>]`` (center, size,
    velocity) sections.
    """
    cp = configparser.ConfigParser()
    cp.read_string(text)
    spec = SceneSpec()
    if cp.has_section("scene"):
        s = cp["scene"]
        spec.n_scans = s.getint("n_scans", spec.n_scans)
        spec.noise_std = s.getfloat("noise_std", spec.noise_std)
        spec.seed = s.getint("seed", spec.seed)
        spec.past = s.getint("past", spec.past)
        spec.future = s.getint("future", spec.future)
    if cp.has_section("sensor"):
        s = cp["sensor"]
        d = spec.intrinsics
        spec.intrinsics = SensorIntrinsics(
            height=s.getint("height", d.height),
            width=s.getint("width", d.width),
            fov_up=math.radians(s.getfloat("fov_up_deg", math.degrees(d.fov_up))),
            fov_down=math.radians(s.getfloat("fov_down_deg", math.degrees(d.fov_down))),
            r_min=s.getfloat("r_min", d.r_min),
            r_max=s.getfloat("r_max", d.r_max),
        )
    if cp.has_section("ego"):
        s = cp["ego"]
        spec.ego = EgoMotion(_floats(s.get("velocity", "0 0 0")),
                             math.radians(s.getfloat("yaw_rate_deg", 0.0)))
    for name in cp.sections():
        kind = name.split()[0]
        s = cp[name]
        if kind == "plane":
            spec.planes.append(Plane(_floats(s.get("normal", "0 0 1")), s.getfloat("offset", 0.0)))
        elif kind == "box":
            spec.boxes.append(Box(_floats(s["center"]), _floats(s.get("size", "1 1 1")),
                                  _floats(s.get("velocity", "0 0 0"))))
        elif kind not in ("scene", "sensor", "ego"):
            raise ValueError(f"unknown scene section [{name}]")
    return spec


def load_scene_spec(path) -> SceneSpec:
    return parse_scene_spec(Path(path).read_text())


def ego_poses(ego: EgoMotion, n: int) -> list[PoseSE3]:
    step = ego.step()
    poses = [PoseSE3.identity()]
    for _ in range(n - 1):
        poses.append(poses[-1] @ step)
    return poses


def cast_rays(origin: np.ndarray, dirs: np.ndarray, planes: Sequence[Plane], boxes, frame: int):
    """Nearest hit distance and primitive label per ray (inf / -1 for misses).

    Labels index planes first, then boxes.
    """
    n = len(dirs)
    best = np.full(n, np.inf)
    label = np.full(n, -1, dtype=np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        for i, pl in enumerate(planes):
            nrm = np.asarray(pl.normal, dtype=np.float64)
            nrm = nrm / np.linalg.norm(nrm)
            denom = dirs @ nrm
            t = (pl.offset - origin @ nrm) / denom
            hit = (np.abs(denom) > 1e-12) & (t > 0) & (t < best)
            best[hit], label[hit] = t[hit], i
        for j, box in enumerate(boxes):
            lo, hi = box.bounds(frame)
            inv = 1.0 / dirs
            t1 = (lo - origin) * inv
            t2 = (hi - origin) * inv
            tnear = np.nanmax(np.minimum(t1, t2), axis=1)
            tfar = np.nanmin(np.maximum(t1, t2), axis=1)
            hit = (tnear <= tfar) & (tnear > 0) & (tnear < best)
            best[hit], label[hit] = tnear[hit], len(planes) + j
    return best, label


def make_synthetic_sequence(spec: SceneSpec) -> SequenceDataset:
    """Ray-cast one return per range-image pixel from each ego pose.

    Clouds are expressed in the sensor frame; ground-truth poses map sensor
    coordinates of frame k into the world (= sensor frame of scan 0).
    """
    if not spec.planes and not spec.boxes:
        raise ValueError("scene is empty: specify at least one plane or box")
    if spec.n_scans < 1:
        raise ValueError(f"scan count must be >= 1, got {spec.n_scans}")
    intr = spec.intrinsics
    dirs = pixel_directions(intr).reshape(-1, 3)
    rng = np.random.default_rng(spec.seed)
    poses = ego_poses(spec.ego, spec.n_scans)
    clouds, labels = [], []
    for k, pose in enumerate(poses):
        r, lab = cast_rays(pose.translation, dirs @ pose.rotation.T, spec.planes, spec.boxes, k)
        keep = (r >= intr.r_min) & (r <= intr.r_max)
        r, lab = r[keep], lab[keep]
        if spec.noise_std > 0:
            r = r + rng.normal(0.0, spec.noise_std, size=r.shape)
        clouds.append(r[:, None] * dirs[keep])
        labels.append(lab)
    return SequenceDataset(clouds, poses, spec.past, spec.future, labels)


def benchmark_scene(seed: int = 0, n_scans: int = 30, intr: SensorIntrinsics | None = None,
                    ego_speed: float = 1.0, object_speed: float = 1.0, yaw_rate: float = 0.0) -> SceneSpec:
    """Street: ground, facades with gaps and setbacks, parked cars, poles, one moving car.

    The ego drives along +x at ``ego_speed`` m/frame; the moving car shares the
    road at ``object_speed`` m/frame, either direction.
    """
    rng = np.random.default_rng(seed)
    intr = intr or SensorIntrinsics.desk()
    planes = [Plane((0.0, 0.0, 1.0), -1.73)]
    half_width = rng.uniform(7.0, 10.0)
    boxes = []
    for side in (-1.0, 1.0):
        x = -30.0
        while x < 130.0:
            length = rng.uniform(6.0, 16.0)
            setback = rng.uniform(0.0, 4.0)
            boxes.append(Box((x + length / 2, side * (half_width + setback + 3.0), 2.0), (length, 6.0, 8.0)))
            x += length + rng.uniform(1.0, 5.0)
        x = -20.0
        while x < 100.0:
            x += rng.uniform(4.0, 14.0)
            if rng.uniform() < 0.6:
                boxes.append(Box((x, side * (half_width - 1.5), -0.98), (4.0, 1.8, 1.5)))
            else:
                boxes.append(Box((x, side * (half_width - 0.3), 0.27), (0.3, 0.3, 4.0)))
    lateral = rng.choice([-1.0, 1.0]) * rng.uniform(3.0, 4.0)
    direction = rng.choice([-1.0, 1.0])
    boxes.append(Box((rng.uniform(12.0, 20.0), lateral, -0.98), (4.0, 1.8, 1.5),
                     (direction * object_speed, 0.0, 0.0)))
    return SceneSpec(planes=planes, boxes=boxes,
                     ego=EgoMotion((ego_speed, 0.0, 0.0), yaw_rate),
                     n_scans=n_scans, intrinsics=intr, seed=seed)
