"""Spherical range-image projection and re-projection of LiDAR point clouds."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

RIMG_MAGIC = b"RIMG"
RIMG_VERSION = 1


@dataclass(frozen=True)
class SensorIntrinsics:
    """Range-image geometry of a rotating LiDAR.

    Angles are in radians; ``fov_down`` is stored as a positive number.
    ``r_min``/``r_max`` bound the range interval the network predicts.
    """

    height: int = 64
    width: int = 2048
    fov_up: float = math.radians(3.0)
    fov_down: float = math.radians(25.0)
    r_min: float = 1.0
    r_max: float = 85.0

    def __post_init__(self):
        if self.height < 1:
            raise ValueError(f"height must be >= 1, got {self.height}")
        if self.width < 2:
            raise ValueError(f"width must be >= 2, got {self.width}")
        if not self.fov_up + self.fov_down > 0:
            raise ValueError("fov_up + fov_down must be positive")
        if not 0 < self.r_min < self.r_max:
            raise ValueError(f"need 0 < r_min < r_max, got [{self.r_min}, {self.r_max}]")

    @property
    def fov(self) -> float:
        return self.fov_up + self.fov_down

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @classmethod
    def kitti(cls) -> "SensorIntrinsics":
        return cls()

    @classmethod
    def apollo(cls) -> "SensorIntrinsics":
        return cls(r_max=110.0)

    @classmethod
    def desk(cls) -> "SensorIntrinsics":
        return cls(height=32, width=64, r_max=50.0)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "SensorIntrinsics":
        kw = {}
        for f in fields(cls):
            if f.name in d:
                kw[f.name] = int(d[f.name]) if f.type in ("int", int) else float(d[f.name])
        return cls(**kw)


@dataclass
class RangeImage:
    values: np.ndarray
    intrinsics: SensorIntrinsics = field(default_factory=SensorIntrinsics)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.shape != self.intrinsics.shape:
            raise ValueError(
                f"range image shape {self.values.shape} does not match intrinsics {self.intrinsics.shape}"
            )
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValueError("range values must be finite and non-negative")

    @property
    def valid(self) -> np.ndarray:
        return self.values > 0


@dataclass
class FrameStack:
    data: np.ndarray  # (P, H, W), oldest frame first
    intrinsics: SensorIntrinsics

    @property
    def shape(self):
        return self.data.shape


def pixel_coordinates(points: np.ndarray, intr: SensorIntrinsics):
    """Return (v, u, r) for every point; points with r == 0 are dropped."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    r = np.linalg.norm(pts, axis=1)
    keep = r > 0
    pts, r = pts[keep], r[keep]
    azimuth = np.arctan2(pts[:, 1], pts[:, 0])
    elevation = np.arcsin(np.clip(pts[:, 2] / r, -1.0, 1.0))
    u = np.floor(0.5 * (1.0 - azimuth / np.pi) * intr.width)
    v = np.floor((1.0 - (elevation + intr.fov_down) / intr.fov) * intr.height)
    u = np.clip(u, 0, intr.width - 1).astype(np.int64)
    v = np.clip(v, 0, intr.height - 1).astype(np.int64)
    return v, u, r


def project(cloud: np.ndarray, intr: SensorIntrinsics) -> RangeImage:
    """Render a point cloud into a range image; the closest point wins each pixel."""
    values = np.zeros(intr.shape, dtype=np.float32)
    v, u, r = pixel_coordinates(cloud, intr)
    if r.size:
        flat = v * intr.width + u
        order = np.lexsort((r, flat))
        flat, r = flat[order], r[order]
        first = np.ones(flat.size, dtype=bool)
        first[1:] = flat[1:] != flat[:-1]
        values.reshape(-1)[flat[first]] = r[first]
    return RangeImage(values, intr)


def pixel_angles(intr: SensorIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Elevation per row and azimuth per column, evaluated at pixel centers."""
    rows = np.arange(intr.height, dtype=np.float64)
    cols = np.arange(intr.width, dtype=np.float64)
    elevation = intr.fov_up - intr.fov * (rows + 0.5) / intr.height
    azimuth = np.pi * (1.0 - 2.0 * (cols + 0.5) / intr.width)
    return elevation, azimuth


def pixel_directions(intr: SensorIntrinsics) -> np.ndarray:
    """Unit ray direction of every pixel center, shape (H, W, 3)."""
    elevation, azimuth = pixel_angles(intr)
    e = elevation[:, None]
    a = azimuth[None, :]
    return np.stack(
        np.broadcast_arrays(np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)), axis=-1
    )


def unproject(img: RangeImage | np.ndarray, mask: np.ndarray | None = None,
              intr: SensorIntrinsics | None = None) -> np.ndarray:
    """Re-project valid pixels (r > 0 and ``mask``) to 3D points, row-major order."""
    if isinstance(img, RangeImage):
        values, intr = img.values, img.intrinsics
    else:
        if intr is None:
            raise ValueError("intrinsics required when passing a raw array")
        values = np.asarray(img)
    keep = values > 0
    if mask is not None:
        keep &= np.asarray(mask, dtype=bool)
    v, u = np.nonzero(keep)
    r = values[v, u].astype(np.float64)
    elevation, azimuth = pixel_angles(intr)
    e, a = elevation[v], azimuth[u]
    return np.stack([r * np.cos(e) * np.cos(a), r * np.cos(e) * np.sin(a), r * np.sin(e)], axis=1)


def stack(images: Sequence[RangeImage]) -> FrameStack:
    if not images:
        raise ValueError("cannot stack an empty list of range images")
    intr = images[0].intrinsics
    for i, img in enumerate(images[1:], start=1):
        if img.intrinsics != intr:
            raise ValueError(f"range image {i} has intrinsics {img.intrinsics}, expected {intr}")
    return FrameStack(np.stack([img.values for img in images]).astype(np.float32), intr)


def save_range_image(path, data: RangeImage | FrameStack | np.ndarray,
                     intr: SensorIntrinsics | None = None) -> None:
    """Write a float32 tensor with its intrinsics in the RIMG container."""
    if isinstance(data, (RangeImage, FrameStack)):
        arr, intr = (data.values if isinstance(data, RangeImage) else data.data), data.intrinsics
    else:
        arr = data
    arr = np.asarray(arr, dtype="<f4", order="C")
    meta = ""
    if intr is not None:
        meta = "".join(f"{k}={v!r}\n" for k, v in intr.to_dict().items())
    meta_bytes = meta.encode()
    with open(path, "wb") as fh:
        fh.write(RIMG_MAGIC)
        fh.write(struct.pack("<B", RIMG_VERSION))
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)


def load_range_image(path) -> tuple[np.ndarray, SensorIntrinsics | None]:
    raw = Path(path).read_bytes()
    if raw[:4] != RIMG_MAGIC:
        raise ValueError(f"{path}: not a range-image file (bad magic)")
    (version,) = struct.unpack_from("<B", raw, 4)
    if version != RIMG_VERSION:
        raise ValueError(f"{path}: unsupported range-image version {version}")
    (rank,) = struct.unpack_from("<I", raw, 5)
    shape = struct.unpack_from(f"<{rank}I", raw, 9)
    offset = 9 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)
    offset += 4 * count
    (meta_len,) = struct.unpack_from("<I", raw, offset)
    meta = raw[offset + 4: offset + 4 + meta_len].decode()
    intr = None
    if meta:
        kv = dict(line.split("=", 1) for line in meta.splitlines() if line)
        intr = SensorIntrinsics.from_dict(kv)
    return arr, intr
