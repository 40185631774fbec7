"""Tests for the evaluation protocols.

Point AUC is the mean of integer-threshold recalls; pose AUC integrates
the pair-error recall curve on a 0.1 degree grid; chamfer counts
nearest-neighbor hits within a distance; depth metrics compare projected
depths after a similarity re-alignment.  Every statistic is checked
against a from-scratch brute-force reference, plus the exact hand
constructions (half-offset recalls, the 5-degree step CDF, uniform 2%
depth inflation).
"""

from __future__ import annotations

import numpy as np
import pytest

from ggsfm import (
    AlignmentFailed,
    CameraParams,
    EmptyCloud,
    NoValidPixels,
    PointMapSet,
    Sim3,
    chamfer,
    depth_metrics,
    point_auc,
    pose_auc,
    pose_errors,
    transform_camera,
)
from ggsfm.metrics import AlignConfig
from ggsfm.scene import PixelCoord
from ggsfm.synth import unproject

from conftest import make_camera, perturbed, random_rotation


# ── test-side references ────────────────────────────────────────────────


def _recall_reference(err, k):
    return sum(1 for e in err if e < k) / len(err)


def _auc_reference(err, tau):
    return sum(_recall_reference(err, k) for k in range(1, tau + 1)) / tau


def _pose_auc_reference(errs, x, step=0.01):
    grid = (np.arange(int(round(x / step))) + 0.5) * step
    return float(np.mean([(errs < t).mean() for t in grid]))


def _chamfer_reference(pred, gt, dist):
    acc = np.mean([min(np.linalg.norm(p - g) for g in gt) < dist
                   for p in pred])
    comp = np.mean([min(np.linalg.norm(g - p) for p in pred) < dist
                    for g in gt])
    return float(acc), float(comp)


def _maps(points, valid=None) -> PointMapSet:
    points = np.asarray(points, dtype=np.float64)
    shape = points.shape[:3]
    if valid is None:
        valid = np.ones(shape, dtype=bool)
    return PointMapSet(points=points, confidence=np.ones(shape),
                       valid=np.asarray(valid, dtype=bool))


# ── point_auc ───────────────────────────────────────────────────────────


def test_perfect_prediction_scores_one(rng):
    pts = rng.normal(size=(2, 4, 5, 3)) * 10
    report = point_auc(_maps(pts), _maps(pts), taus=[1, 5], align=None)
    assert all(v == 1.0 for v in report.recall_at.values())
    assert report.auc_at[1] == 1.0 and report.auc_at[5] == 1.0
    assert report.n_valid == 2 * 4 * 5


def test_half_offset_recall_and_auc(rng):
    gt = rng.normal(size=(1, 2, 4, 3))
    pred = gt.copy()
    pred[0, 0, :, 0] += 1.5          # 4 of 8 pixels off by 1.5 units
    report = point_auc(_maps(pred), _maps(gt), taus=[2], align=None)
    assert report.recall_at[1] == 0.5
    assert report.recall_at[2] == 1.0
    assert report.auc_at[2] == 0.75


def test_random_errors_match_brute_force(rng):
    gt = rng.normal(size=(2, 5, 6, 3))
    pred = gt + rng.normal(scale=1.2, size=gt.shape)
    report = point_auc(_maps(pred), _maps(gt), taus=[3, 7], align=None)
    err = np.linalg.norm((pred - gt).reshape(-1, 3), axis=1)
    for k, got in report.recall_at.items():
        assert got == _recall_reference(err, k)
    for tau, got in report.auc_at.items():
        assert abs(got - _auc_reference(err, tau)) < 1e-15


def test_recall_is_monotone_and_bounds_auc(rng):
    gt = rng.normal(size=(1, 6, 6, 3))
    pred = gt + rng.normal(scale=2.0, size=gt.shape)
    report = point_auc(_maps(pred), _maps(gt), taus=[8], align=None)
    values = [report.recall_at[k] for k in range(1, 9)]
    assert all(a <= b for a, b in zip(values, values[1:]))
    assert report.auc_at[8] <= report.recall_at[8]
    assert report.auc_at[8] == sum(values) / 8


def test_unit_scale_converts_world_lengths(rng):
    gt = rng.normal(size=(1, 3, 4, 3))
    pred = gt.copy()
    pred[0, 0, 0] += [0.015, 0.0, 0.0]   # 1.5 cm in a meter-unit world
    report = point_auc(_maps(pred), _maps(gt), taus=[2], align=None,
                       unit_scale=0.01, unit="cm")
    assert report.recall_at[1] == 11 / 12
    assert report.recall_at[2] == 1.0
    assert report.unit == "cm"


def test_alignment_undoes_a_similarity(rng):
    gt = rng.normal(size=(1, 10, 12, 3)) * 3
    pred = gt + rng.normal(scale=0.4, size=gt.shape)
    base = point_auc(_maps(pred), _maps(gt), taus=[3])
    g = Sim3(s=1.7, q=rng.normal(size=4), t=rng.normal(size=3) * 2)
    moved = g.apply(pred.reshape(-1, 3)).reshape(pred.shape)
    after = point_auc(_maps(moved), _maps(gt), taus=[3])
    for k in base.recall_at:
        assert abs(base.recall_at[k] - after.recall_at[k]) < 1e-9
    assert abs(base.auc_at[3] - after.auc_at[3]) < 1e-9


def test_only_jointly_valid_pixels_count(rng):
    gt = rng.normal(size=(1, 2, 3, 3))
    pred = gt + 100.0                 # every pixel wrong by 100 units
    vp = np.array([[[True, True, False], [True, False, True]]])
    vg = np.array([[[True, False, False], [True, False, True]]])
    report = point_auc(_maps(pred, vp), _maps(gt, vg), taus=[1], align=None)
    assert report.n_valid == 3
    assert report.recall_at[1] == 0.0


def test_point_auc_error_conditions(rng):
    gt = rng.normal(size=(1, 3, 3, 3))
    with pytest.raises(NoValidPixels):
        point_auc(_maps(gt[:, :2]), _maps(gt), taus=[1], align=None)
    with pytest.raises(NoValidPixels):
        point_auc(_maps(gt, np.zeros((1, 3, 3), bool)), _maps(gt),
                  taus=[1], align=None)
    with pytest.raises(ValueError):
        point_auc(_maps(gt), _maps(gt), taus=[], align=None)
    with pytest.raises(ValueError):
        point_auc(_maps(gt), _maps(gt), taus=[0], align=None)
    # alignment cannot reach the required inlier ratio on 60% corruption
    pred = gt.copy().reshape(-1, 3)
    pred[:5] += rng.normal(scale=50.0, size=(5, 3))
    with pytest.raises(AlignmentFailed):
        point_auc(_maps(pred.reshape(gt.shape)), _maps(gt), taus=[1],
                  align=AlignConfig(max_err=0.01, min_inlier_ratio=0.8))


# ── pose_auc ────────────────────────────────────────────────────────────


def _ring(n, rng=None, radius=3.0):
    cams = []
    for i in range(n):
        a = 2 * np.pi * i / n
        c = radius * np.array([np.cos(a), np.sin(a), 0.1 * np.sin(2 * a)])
        from conftest import lookat_camera
        cams.append(lookat_camera(c, np.zeros(3)))
    return cams


def test_identical_cameras_score_one():
    cams = _ring(5)
    auc = pose_auc(cams, cams, max_deg=(1.0, 5.0, 10.0))
    assert auc[1.0] == 1.0 and auc[5.0] == 1.0 and auc[10.0] == 1.0


def test_uniform_five_degree_error_gives_half_auc_at_ten():
    gt = [make_camera(t=[0.0, 0.0, 0.0]), make_camera(t=[-1.0, 0.0, 0.0])]
    a = np.radians(5.0)
    pred = [make_camera(t=[0.0, 0.0, 0.0]),
            make_camera(t=[-np.cos(a), -np.sin(a), 0.0])]
    errs = pose_errors(pred, gt)
    assert np.allclose(errs, 5.0, atol=1e-9)
    auc = pose_auc(pred, gt, max_deg=(5.0, 10.0))
    assert auc[10.0] == 0.5
    assert auc[5.0] == 0.0  # strict comparison: nothing below 5 degrees


def test_pose_auc_matches_fine_grid_reference(rng):
    gt = _ring(6)
    pred = [perturbed(c, rng, rot_deg=2.5, trans_frac=0.05) for c in gt]
    errs = pose_errors(pred, gt)
    auc = pose_auc(pred, gt, max_deg=(5.0, 10.0))
    for x in (5.0, 10.0):
        assert abs(auc[x] - _pose_auc_reference(errs, x)) < 0.005


def test_pose_auc_ignores_a_global_rigid_move(rng):
    gt = _ring(5)
    pred = [perturbed(c, rng, rot_deg=1.0, trans_frac=0.02) for c in gt]
    base = pose_auc(pred, gt)
    g = Sim3(s=1.0, q=rng.normal(size=4), t=rng.normal(size=3))
    moved = [transform_camera(c, g) for c in pred]
    after = pose_auc(moved, gt)
    for k in base:
        assert abs(base[k] - after[k]) < 1e-9


def test_vanishing_baselines_are_benign():
    # identical camera centers: both relative translations vanish; the
    # pair error reduces to the rotation error alone
    c0 = make_camera()
    c1 = make_camera(q=[np.cos(np.radians(1.0)), 0.0, 0.0,
                        np.sin(np.radians(1.0))])
    errs = pose_errors([c0, c1], [c0, c1])
    assert np.allclose(errs, 0.0, atol=1e-12)
    # one side vanishing, the other not: a hard 180-degree penalty
    gt = [make_camera(t=[0.0, 0.0, 0.0]), make_camera(t=[-1.0, 0.0, 0.0])]
    pred = [make_camera(), make_camera()]
    assert np.allclose(pose_errors(pred, gt), 180.0)


def test_pose_errors_require_matching_lists():
    with pytest.raises(ValueError):
        pose_errors([make_camera()], [make_camera()])
    with pytest.raises(ValueError):
        pose_errors([make_camera()] * 3, [make_camera()] * 2)


# ── chamfer ─────────────────────────────────────────────────────────────


def test_identical_clouds_are_fully_accurate_and_complete(rng):
    pts = rng.normal(size=(40, 3))
    assert chamfer(pts, pts, dist=1e-9) == (1.0, 1.0)


def test_single_point_prediction(rng):
    gt = rng.normal(size=(10, 3)) * 10  # well separated at dist=1e-3
    acc, comp = chamfer(gt[[3]], gt, dist=1e-3)
    assert acc == 1.0
    assert comp == 1 / 10


def test_chamfer_matches_quadratic_reference(rng):
    for _ in range(5):
        pred = rng.normal(size=(25, 3))
        gt = rng.normal(size=(30, 3))
        dist = float(rng.uniform(0.2, 1.5))
        assert chamfer(pred, gt, dist) == _chamfer_reference(pred, gt, dist)


def test_subset_prediction_has_full_accuracy(rng):
    gt = rng.normal(size=(50, 3))
    pred = gt[rng.choice(50, size=20, replace=False)]
    acc, _ = chamfer(pred, gt, dist=1e-6)
    assert acc == 1.0


def test_chamfer_rejects_empty_clouds(rng):
    with pytest.raises(EmptyCloud):
        chamfer(np.zeros((0, 3)), rng.normal(size=(5, 3)), 1.0)
    with pytest.raises(EmptyCloud):
        chamfer(rng.normal(size=(5, 3)), np.zeros((0, 3)), 1.0)


# ── depth_metrics ───────────────────────────────────────────────────────


def _depth_scene(rng, n_views=2, h=6, w=8, scale=1.0):
    """Cameras plus maps whose points sit at known per-pixel depths."""
    cams = [make_camera(q=rng.normal(size=4), t=rng.normal(size=3))
            for _ in range(n_views)]
    depth = 2.0 + rng.random(size=(n_views, h, w)) * 3.0
    pts = np.zeros((n_views, h, w, 3))
    for i, cam in enumerate(cams):
        for v in range(h):
            for u in range(w):
                pts[i, v, u] = unproject(cam, PixelCoord(float(u), float(v)),
                                         scale * depth[i, v, u])
    return cams, depth, _maps(pts)


def test_exact_depths_have_zero_rel_and_full_inliers(rng):
    cams, depth, pred = _depth_scene(rng)
    rel, inl = depth_metrics(pred, cams, depth, np.ones_like(depth, bool),
                             Sim3.identity())
    assert rel < 1e-12
    assert inl[1.01] == 1.0 and inl[1.03] == 1.0


def test_two_percent_inflation_splits_the_inlier_ratios(rng):
    cams, depth, pred = _depth_scene(rng, scale=1.02)
    rel, inl = depth_metrics(pred, cams, depth, np.ones_like(depth, bool),
                             Sim3.identity())
    assert abs(rel - 0.02) < 1e-9
    assert inl[1.01] == 0.0
    assert inl[1.03] == 1.0


def test_depth_metrics_match_per_pixel_brute_force(rng):
    cams, depth, pred = _depth_scene(rng)
    noisy = depth * (1.0 + rng.normal(scale=0.02, size=depth.shape))
    rel, inl = depth_metrics(pred, cams, noisy, np.ones_like(depth, bool),
                             Sim3.identity(), ratios=(1.01, 1.03, 1.1))
    d_hat = depth.reshape(-1)
    d = noisy.reshape(-1)
    assert abs(rel - np.mean(np.abs(d_hat - d) / d)) < 1e-12
    for r in (1.01, 1.03, 1.1):
        want = np.mean(np.maximum(d_hat / d, d / d_hat) < r)
        assert abs(inl[r] - want) < 1e-12


def test_alignment_transform_is_applied_to_points_and_cameras(rng):
    cams, depth, pred = _depth_scene(rng)
    g = Sim3(s=2.2, q=rng.normal(size=4), t=rng.normal(size=3))
    ginv = g.inverse()
    moved = _maps(ginv.apply(pred.points.reshape(-1, 3))
                  .reshape(pred.points.shape))
    moved_cams = [transform_camera(c, ginv) for c in cams]
    rel, inl = depth_metrics(moved, moved_cams, depth,
                             np.ones_like(depth, bool), g)
    assert rel < 1e-9
    assert inl[1.01] == 1.0


def test_depth_metrics_respect_the_mask(rng):
    cams, depth, pred = _depth_scene(rng)
    mask = np.zeros_like(depth, dtype=bool)
    with pytest.raises(NoValidPixels):
        depth_metrics(pred, cams, depth, mask, Sim3.identity())
    mask[0, 0, 0] = True
    bad = depth.copy()
    bad[0, 0, 0] *= 1.5               # only the masked pixel counts
    rel, _ = depth_metrics(pred, cams, bad, mask, Sim3.identity())
    assert abs(rel - 0.5 / 1.5) < 1e-12


# ── report formatting ───────────────────────────────────────────────────


def test_report_lines_are_flat_key_value_pairs(rng):
    gt = rng.normal(size=(1, 4, 4, 3))
    pred = gt + rng.normal(scale=1.0, size=gt.shape)
    report = point_auc(_maps(pred), _maps(gt), taus=[2], align=None,
                       unit="cm")
    lines = report.lines()
    assert f"n_valid={16}" in lines
    assert "unit=cm" in lines
    for line in lines:
        key, _, value = line.partition("=")
        assert key and value
