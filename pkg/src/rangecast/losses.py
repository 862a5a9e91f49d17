"""Range, mask and Chamfer losses and their weighted per-step total."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .autodiff import Tensor
from .autodiff.tensor import make_node
from .range_projection import RangeImage, SensorIntrinsics, pixel_directions, unproject

log = logging.getLogger(__name__)

BCE_EPS = 1e-7


def _check_same(pred_shape, gt_shape, what):
    if tuple(pred_shape) != tuple(gt_shape):
        raise ValueError(f"{what}: prediction shape {tuple(pred_shape)} != ground truth shape {tuple(gt_shape)}")


def range_loss(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Mean absolute range error over pixels with a ground-truth return, divided by H*W."""
    gt = np.asarray(gt)
    _check_same(pred.shape, gt.shape, "range_loss")
    valid = gt > 0
    diff = np.where(valid, pred.data.astype(np.float64) - gt, 0.0)
    n = gt.size
    value = np.asarray(np.abs(diff).sum() / n, dtype=pred.dtype)
    sign = (np.sign(diff) / n).astype(pred.dtype)
    return make_node(value, (pred,), lambda g: (g * sign,), "range_loss")


def mask_loss(prob: Tensor, gt_valid: np.ndarray) -> Tensor:
    """Binary cross-entropy, probabilities clamped to [eps, 1 - eps]."""
    y = np.asarray(gt_valid, dtype=np.float64)
    _check_same(prob.shape, y.shape, "mask_loss")
    p = prob.data.astype(np.float64)
    pc = np.clip(p, BCE_EPS, 1 - BCE_EPS)
    n = y.size
    value = np.asarray(np.sum(-y * np.log(pc) - (1 - y) * np.log(1 - pc)) / n, dtype=prob.dtype)
    inside = (p >= BCE_EPS) & (p <= 1 - BCE_EPS)
    dp = (np.where(inside, -y / pc + (1 - y) / (1 - pc), 0.0) / n).astype(prob.dtype)
    return make_node(value, (prob,), lambda g: (g * dp,), "mask_loss")


def nearest_sq_dists(query: np.ndarray, ref: np.ndarray, workers: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Exact squared distance and index of the nearest ``ref`` point for every query."""
    tree = cKDTree(ref)
    d, idx = tree.query(query, k=1, workers=workers)
    diff = query - ref[idx]
    return np.einsum("ij,ij->i", diff, diff), idx


def chamfer(pred: np.ndarray, gt: np.ndarray, workers: int = 1) -> float:
    """Symmetric mean squared nearest-neighbor distance (m^2)."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError(f"chamfer distance undefined for empty cloud (|pred|={len(pred)}, |gt|={len(gt)})")
    d_pg, _ = nearest_sq_dists(pred, gt, workers)
    d_gp, _ = nearest_sq_dists(gt, pred, workers)
    return float(d_pg.mean() + d_gp.mean())


def chamfer_brute_force(pred: np.ndarray, gt: np.ndarray, block: int = 2048) -> float:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError("chamfer distance undefined for empty cloud")
    min_pg = np.full(len(pred), np.inf)
    min_gp = np.full(len(gt), np.inf)
    for i in range(0, len(pred), block):
        d = ((pred[i:i + block, None, :] - gt[None, :, :]) ** 2).sum(-1)
        min_pg[i:i + block] = d.min(axis=1)
        min_gp = np.minimum(min_gp, d.min(axis=0))
    return float(min_pg.mean() + min_gp.mean())


def chamfer_range_loss(ranges: Tensor, keep: np.ndarray, directions: np.ndarray, gt: np.ndarray,
                       workers: int = 1) -> Tensor | None:
    """Chamfer distance between kept predicted pixels and ``gt``, differentiable in the ranges.

    The kept set itself is fixed (no gradient through the mask). Returns None
    when either cloud is empty.
    """
    v, u = np.nonzero(keep)
    if len(v) == 0 or len(gt) == 0:
        return None
    dirs = directions[v, u].astype(np.float64)
    r = ranges.data[v, u].astype(np.float64)
    pts = r[:, None] * dirs
    gt = np.asarray(gt, dtype=np.float64)
    d_pg, nn_pg = nearest_sq_dists(pts, gt, workers)
    d_gp, nn_gp = nearest_sq_dists(gt, pts, workers)
    n, m = len(pts), len(gt)
    value = np.asarray(d_pg.mean() + d_gp.mean(), dtype=ranges.dtype)
    grad_pts = 2.0 * (pts - gt[nn_pg]) / n
    np.add.at(grad_pts, nn_gp, 2.0 * (pts[nn_gp] - gt) / m)
    grad_r = np.einsum("ij,ij->i", grad_pts, dirs)
    dense = np.zeros(ranges.shape, dtype=ranges.dtype)
    dense[v, u] = grad_r

    return make_node(value, (ranges,), lambda g: (g * dense,), "chamfer")


@dataclass
class LossWeights:
    mask: float = 1.0
    chamfer: float = 0.0

    def __post_init__(self):
        if self.mask < 0 or self.chamfer < 0:
            raise ValueError(f"loss weights must be >= 0, got mask={self.mask}, chamfer={self.chamfer}")


@dataclass
class LossReport:
    range: list[float] = field(default_factory=list)
    mask: list[float] = field(default_factory=list)
    chamfer: list[float] = field(default_factory=list)   # nan where not computed
    step_total: list[float] = field(default_factory=list)
    total: float = 0.0
    flagged_steps: list[int] = field(default_factory=list)

    @property
    def range_sum(self) -> float:
        return float(np.sum(self.range))

    @property
    def mask_sum(self) -> float:
        return float(np.sum(self.mask))

    @property
    def chamfer_sum(self) -> float:
        return float(np.nansum(self.chamfer))

    def rows(self, sample_id) -> list[tuple]:
        out = []
        for t in range(len(self.range)):
            out.append((sample_id, t + 1, self.range[t], self.mask[t], self.chamfer[t], self.step_total[t]))
        return out


def write_loss_csv(path, reports: Sequence[tuple[object, LossReport]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "step", "L_R", "L_M", "L_CD", "total"])
        for sid, rep in reports:
            w.writerows(rep.rows(sid))


def total_loss(pred, gt: np.ndarray | Sequence[RangeImage], weights: LossWeights,
               intr: SensorIntrinsics, compute_chamfer: bool | None = None,
               workers: int = 1) -> tuple[Tensor, LossReport]:
    """Sum over future steps of L_R + a_M L_M + a_CD L_CD.

    ``pred`` is a network Prediction; ``gt`` is (F, H, W) or a list of F range
    images. Chamfer is evaluated when its weight is positive, or when
    ``compute_chamfer`` forces it (for reporting only if the weight is 0).
    """
    if not isinstance(gt, np.ndarray):
        gt = np.stack([g.values if isinstance(g, RangeImage) else np.asarray(g) for g in gt])
    F = pred.ranges.shape[0]
    if gt.shape[0] != F:
        raise ValueError(f"prediction has {F} steps, ground truth has {gt.shape[0]}")
    if compute_chamfer is None:
        compute_chamfer = weights.chamfer > 0
    directions = pixel_directions(intr) if compute_chamfer else None
    valid = pred.valid
    report = LossReport()
    total = None
    for t in range(F):
        r_t = pred.ranges[t]
        lr = range_loss(r_t, gt[t])
        lm = mask_loss(pred.mask_prob[t], gt[t] > 0)
        term = lr + lm * weights.mask
        report.range.append(float(lr.data))
        report.mask.append(float(lm.data))
        cd_val = float("nan")
        if compute_chamfer:
            gt_cloud = unproject(gt[t], intr=intr)
            cd = chamfer_range_loss(r_t, valid[t], directions, gt_cloud, workers)
            if cd is None:
                log.info("step %d: empty predicted cloud, Chamfer term skipped", t + 1)
                report.flagged_steps.append(t + 1)
            else:
                cd_val = float(cd.data)
                if weights.chamfer > 0:
                    term = term + cd * weights.chamfer
        report.chamfer.append(cd_val)
        report.step_total.append(float(term.data))
        total = term if total is None else total + term
    report.total = float(total.data)
    return total, report
