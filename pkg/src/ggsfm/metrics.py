"""Evaluation protocols: point AUC, pose AUC, chamfer, depth metrics.

Point errors are measured after a robust similarity alignment of the
prediction onto the ground truth (skippable with align=None when the
frames already agree). Thresholds are integers in a dataset unit; the
unit_scale argument gives the world length of one such unit so desk
scale scenes can talk about centimeters or millimeters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .alignment import Sim3, robust_umeyama, transform_camera
from .errors import AlignmentFailed, EmptyCloud, InsufficientInliers, \
    NoValidPixels

_POSE_GRID_STEP = 0.1  # degrees


@dataclass
class AlignConfig:
    """Robust pre-alignment settings. max_err is in dataset units."""

    max_err: float = 3.0
    min_inlier_ratio: float = 0.8
    seed: int = 0


@dataclass
class MetricReport:
    recall_at: dict = field(default_factory=dict)
    auc_at: dict = field(default_factory=dict)
    pose_auc: dict = field(default_factory=dict)
    chamfer_acc: float | None = None
    chamfer_comp: float | None = None
    depth_rel: float | None = None
    depth_inlier: dict = field(default_factory=dict)
    n_valid: int = 0
    unit: str = ""
    sim3: Sim3 | None = None

    def lines(self) -> list[str]:
        out = []
        for k in sorted(self.recall_at):
            out.append(f"recall@{k}={self.recall_at[k]:.17g}")
        for k in sorted(self.auc_at):
            out.append(f"auc@{k}={self.auc_at[k]:.17g}")
        for k in sorted(self.pose_auc):
            out.append(f"pose_auc@{k:g}={self.pose_auc[k]:.17g}")
        if self.chamfer_acc is not None:
            out.append(f"chamfer_acc={self.chamfer_acc:.17g}")
        if self.chamfer_comp is not None:
            out.append(f"chamfer_comp={self.chamfer_comp:.17g}")
        if self.depth_rel is not None:
            out.append(f"depth_rel={self.depth_rel:.17g}")
        for k in sorted(self.depth_inlier):
            out.append(f"depth_inlier@{k:g}={self.depth_inlier[k]:.17g}")
        out.append(f"n_valid={self.n_valid}")
        if self.unit:
            out.append(f"unit={self.unit}")
        return out


def point_auc(pred, gt, taus, align: AlignConfig | None = AlignConfig(),
              unit_scale: float = 1.0, unit: str = "") -> MetricReport:
    """Recall and AUC of per-pixel point errors on the shared valid set.

    Recall@k counts errors strictly below k dataset units; AUC@tau is the
    mean of Recall@1..tau over integer thresholds. With an AlignConfig
    the prediction is first aligned to the ground truth by a seeded
    robust similarity fit on the valid pixels.
    """
    if pred.shape != gt.shape:
        raise NoValidPixels("prediction and ground truth grids differ")
    taus = [int(t) for t in taus]
    if not taus or min(taus) < 1:
        raise ValueError("thresholds must be positive integers")
    mask = pred.valid & gt.valid
    n_valid = int(mask.sum())
    if n_valid == 0:
        raise NoValidPixels("no pixel is valid in both maps")
    p = pred.points[mask]
    g = gt.points[mask]
    sim3 = None
    if align is not None:
        try:
            sim3, _ = robust_umeyama(p, g,
                                     max_err=align.max_err * unit_scale,
                                     min_inlier_ratio=align.min_inlier_ratio,
                                     seed=align.seed)
        except InsufficientInliers as e:
            raise AlignmentFailed(str(e))
        p = sim3.apply(p)
    err = np.linalg.norm(p - g, axis=1) / unit_scale
    report = MetricReport(n_valid=n_valid, unit=unit, sim3=sim3)
    for k in range(1, max(taus) + 1):
        report.recall_at[k] = float(np.count_nonzero(err < k)) / n_valid
    for tau in taus:
        report.auc_at[tau] = sum(report.recall_at[k]
                                 for k in range(1, tau + 1)) / tau
    return report


def _rotation_angle_deg(R: np.ndarray) -> float:
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def _direction_angle_deg(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-9 and nb < 1e-9:
        return 0.0  # both baselines vanish: direction error undefined, benign
    if na < 1e-9 or nb < 1e-9:
        return 180.0
    c = float(np.dot(a, b) / (na * nb))
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def pose_errors(pred, gt) -> np.ndarray:
    """Per ordered camera pair, max of relative rotation error and
    relative translation direction error, in degrees."""
    if len(pred) != len(gt) or len(pred) < 2:
        raise ValueError("need two equally sized camera lists")
    n = len(pred)
    errs = []
    for i in range(n):
        for k in range(n):
            if i == k:
                continue
            Rp = pred[i].R @ pred[k].R.T
            Rg = gt[i].R @ gt[k].R.T
            tp = pred[i].t - Rp @ pred[k].t
            tg = gt[i].t - Rg @ gt[k].t
            e_rot = _rotation_angle_deg(Rp @ Rg.T)
            e_t = _direction_angle_deg(tp, tg)
            errs.append(max(e_rot, e_t))
    return np.asarray(errs)


def pose_auc(pred, gt, max_deg=(1.0, 5.0, 10.0)) -> dict:
    """AUC of the pose-error recall curve up to each threshold.

    Integrates recall(t) = fraction of pairs with error strictly below t
    over (0, X] by the midpoint rule on a 0.1 degree grid; midpoint
    sampling keeps the quantization error unbiased, so the result tracks
    arbitrarily fine integration within half a cell.
    """
    errs = pose_errors(pred, gt)
    out = {}
    for x in max_deg:
        n_cells = int(round(x / _POSE_GRID_STEP))
        grid = (np.arange(n_cells) + 0.5) * _POSE_GRID_STEP
        recall = (errs[None, :] < grid[:, None]).mean(axis=1)
        out[float(x)] = float(recall.mean())
    return out


def chamfer(pred: np.ndarray, gt: np.ndarray,
            dist: float) -> tuple[float, float]:
    """(accuracy, completeness): fractions of points with a neighbor in
    the other cloud strictly closer than dist."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(pred) == 0 or len(gt) == 0:
        raise EmptyCloud("chamfer needs two non-empty clouds")
    d_pred, _ = cKDTree(gt).query(pred, k=1)
    d_gt, _ = cKDTree(pred).query(gt, k=1)
    acc = float(np.count_nonzero(d_pred < dist)) / len(pred)
    comp = float(np.count_nonzero(d_gt < dist)) / len(gt)
    return acc, comp


def depth_metrics(pred, cams, gt_depth: np.ndarray, mask: np.ndarray,
                  sim3: Sim3, ratios=(1.01, 1.03)) -> tuple[float, dict]:
    """Absolute relative depth error and inlier ratios.

    pred and cams live in the prediction frame; sim3 is the evaluation
    alignment onto the ground-truth frame. Points and cameras are both
    transformed, predicted depths read off per pixel, no further scaling.
    """
    gt_depth = np.asarray(gt_depth, dtype=np.float64)
    m = np.asarray(mask, dtype=bool) & pred.valid & (gt_depth > 0)
    if not np.any(m):
        raise NoValidPixels("no pixel with valid depth")
    rels = []
    d_pred_all, d_gt_all = [], []
    for i, cam in enumerate(cams):
        sel = m[i]
        if not np.any(sel):
            continue
        c2 = transform_camera(cam, sim3)
        x = sim3.apply(pred.points[i][sel])
        d_hat = x @ c2.R[2] + c2.t[2]
        d_pred_all.append(d_hat)
        d_gt_all.append(gt_depth[i][sel])
    d_hat = np.concatenate(d_pred_all)
    d = np.concatenate(d_gt_all)
    rel = float(np.mean(np.abs(d_hat - d) / d))
    inlier = {}
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.maximum(d_hat / d, d / d_hat)
    ratio[~np.isfinite(ratio)] = np.inf
    for r in ratios:
        inlier[float(r)] = float(np.count_nonzero(ratio < r)) / len(ratio)
    return rel, inlier
