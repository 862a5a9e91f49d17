"""Quick build check: gradient checks, file round trips and the Chamfer oracle."""
from __future__ import annotations

import tempfile
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff.functional import conv_forward, conv_input_grad
from .lidar_io import read_scan_bin, write_scan_bin
from .losses import chamfer, chamfer_brute_force, mask_loss, range_loss
from .network import ArchitectureConfig, build, load_checkpoint, save_checkpoint
from .range_projection import RangeImage, SensorIntrinsics, load_range_image, project, save_range_image, unproject

GRAD_TOL = 1e-4


def _t(rng, *shape, lo=-1.0, hi=1.0):
    return ad.Tensor(rng.uniform(lo, hi, shape), requires_grad=True)


def _gradchecks(rng) -> float:
    pad = (("none", 0), ("zero", 1), ("circular", 1))
    gt = rng.uniform(1, 5, (4, 5)) * (rng.uniform(size=(4, 5)) > 0.3)
    cases: list[tuple[Callable, list]] = [
        (lambda x, w, b: ad.conv3d(x, w, b, (1, 2, 1), pad), [_t(rng, 2, 3, 4, 6), _t(rng, 3, 2, 2, 3, 3), _t(rng, 3)]),
        (lambda x, w: ad.conv3d_transposed(x, w, None, (1, 2, 2)), [_t(rng, 2, 2, 3, 3), _t(rng, 2, 3, 2, 2, 2)]),
        (lambda x, g, b: ad.batchnorm3d(x, g, b, np.zeros(2), np.ones(2), True),
         [_t(rng, 2, 2, 3, 3), _t(rng, 2, lo=0.5, hi=1.5), _t(rng, 2)]),
        (lambda x: ad.leaky_relu(x, 0.2), [_t(rng, 3, 4)]),
        (ad.sigmoid, [_t(rng, 3, 4)]),
        (lambda p: range_loss(p, gt), [_t(rng, 4, 5, lo=0.0, hi=6.0)]),
        (lambda p: mask_loss(p, gt > 0), [_t(rng, 4, 5, lo=0.05, hi=0.95)]),
    ]
    worst = 0.0
    for fn, inputs in cases:
        worst = max(worst, max(ad.gradcheck(fn, inputs, h=1e-4, rng=rng)))
    return worst


def _adjointness(rng) -> float:
    w = rng.normal(size=(3, 2, 2, 3, 3))
    x = rng.normal(size=(2, 5, 9, 12))
    y = rng.normal(size=(3, 4, 4, 5))
    lhs = float(np.sum(conv_forward(x, w, (1, 2, 2)) * y))
    rhs = float(np.sum(x * conv_input_grad(y, w, (1, 2, 2), x.shape[1:])))
    return abs(lhs - rhs) / max(1.0, abs(lhs))


def _projection_round_trip(rng) -> bool:
    intr = SensorIntrinsics(height=16, width=128)
    for _ in range(5):
        vals = rng.uniform(intr.r_min, intr.r_max, intr.shape) * (rng.uniform(size=intr.shape) < 0.7)
        img = RangeImage(vals.astype(np.float32), intr)
        if not np.array_equal(project(unproject(img), intr).values, img.values):
            return False
    return True


def _file_round_trips(rng) -> bool:
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        pts = rng.normal(scale=20, size=(100, 3)).astype(np.float32)
        write_scan_bin(tmp / "s.bin", pts)
        if not np.array_equal(read_scan_bin(tmp / "s.bin").astype(np.float32), pts):
            return False
        intr = SensorIntrinsics.desk()
        img = rng.uniform(0, 50, (3,) + intr.shape).astype(np.float32)
        save_range_image(tmp / "a.rimg", img, intr)
        back, back_intr = load_range_image(tmp / "a.rimg")
        if not (np.array_equal(back, img) and back_intr == intr):
            return False
        cfg = ArchitectureConfig(past=2, future=2, channels=(2, 2), height_factors=(2, 2), width_factors=(2, 2),
                                 temporal_reductions=(1, 0), intrinsics=SensorIntrinsics(height=4, width=8))
        model = build(cfg, seed=1)
        save_checkpoint(tmp / "m.pcfm", model, (1.5, 2.5))
        loaded, stats, _ = load_checkpoint(tmp / "m.pcfm", cfg)
        save_checkpoint(tmp / "n.pcfm", loaded, stats)
        return (tmp / "m.pcfm").read_bytes() == (tmp / "n.pcfm").read_bytes()


def _chamfer_oracle(rng) -> float:
    worst = 0.0
    for _ in range(10):
        a = rng.normal(scale=5, size=(rng.integers(1, 200), 3))
        b = rng.normal(scale=5, size=(rng.integers(1, 200), 3))
        worst = max(worst, abs(chamfer(a, b) - chamfer_brute_force(a, b)))
    return worst


def run_selftest(seed: int = 0) -> list[tuple[str, bool, str]]:
    """Return (check, passed, detail) rows."""
    rng = np.random.default_rng(seed)
    results = []
    err = _gradchecks(rng)
    results.append(("gradient checks", err <= GRAD_TOL, f"max relative error {err:.2e}"))
    err = _adjointness(rng)
    results.append(("transposed conv adjointness", err <= 1e-9, f"relative gap {err:.2e}"))
    results.append(("range image round trip", _projection_round_trip(rng), "project(unproject(img)) == img"))
    results.append(("file round trips", _file_round_trips(rng), "scan, range image and checkpoint files"))
    err = _chamfer_oracle(rng)
    results.append(("chamfer oracle", err <= 1e-9, f"max deviation {err:.2e}"))
    return results
