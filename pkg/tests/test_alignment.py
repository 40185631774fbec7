"""Tests for similarity (scale + rotation + translation) alignment.

The closed-form least-squares similarity is checked the hard way: plant a
known transform and recover it, verify optimality against a cloud of
random candidate transforms, and confirm every documented degeneracy
raises.  The robust variant is checked on planted-outlier mixtures where
the true inlier set is known exactly.
"""

from __future__ import annotations

import numpy as np
import pytest

from ggsfm import (
    DegenerateConfiguration,
    InsufficientInliers,
    Sim3,
    project,
    project_points,
    robust_umeyama,
    transform_camera,
    umeyama,
)

from conftest import make_camera, random_rotation


def _rz(deg: float) -> np.ndarray:
    c, s = np.cos(np.radians(deg)), np.sin(np.radians(deg))
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _rms(residuals: np.ndarray) -> float:
    """Per-coordinate root mean square of an (n, 3) residual array."""
    return float(np.sqrt(np.mean(residuals ** 2)))


# ── Sim3 type ───────────────────────────────────────────────────────────


def test_identity_transform_is_a_no_op(rng):
    pts = rng.normal(size=(10, 3))
    assert np.array_equal(Sim3.identity().apply(pts), pts)


def test_apply_matches_explicit_formula(rng):
    g = Sim3(s=1.7, q=rng.normal(size=4), t=np.array([0.1, -2.0, 0.4]))
    pts = rng.normal(size=(6, 3))
    want = np.stack([g.s * g.R @ p + g.t for p in pts])
    assert np.allclose(g.apply(pts), want, atol=1e-14)


def test_inverse_round_trips(rng):
    g = Sim3(s=0.35, q=rng.normal(size=4), t=rng.normal(size=3))
    pts = rng.normal(size=(8, 3))
    assert np.allclose(g.inverse().apply(g.apply(pts)), pts, atol=1e-12)
    assert np.allclose(g.apply(g.inverse().apply(pts)), pts, atol=1e-12)


def test_compose_applies_right_then_left(rng):
    a = Sim3(s=2.0, q=rng.normal(size=4), t=rng.normal(size=3))
    b = Sim3(s=0.5, q=rng.normal(size=4), t=rng.normal(size=3))
    pts = rng.normal(size=(5, 3))
    assert np.allclose(a.compose(b).apply(pts), a.apply(b.apply(pts)),
                       atol=1e-12)


def test_matrix_acts_on_homogeneous_points(rng):
    g = Sim3(s=3.0, q=rng.normal(size=4), t=rng.normal(size=3))
    pts = rng.normal(size=(4, 3))
    hom = np.hstack([pts, np.ones((4, 1))])
    assert np.allclose(hom @ g.matrix().T, g.apply(pts), atol=1e-12)


def test_scale_must_be_positive():
    with pytest.raises(ValueError):
        Sim3(s=0.0, q=[1, 0, 0, 0], t=[0, 0, 0])
    with pytest.raises(ValueError):
        Sim3(s=-1.0, q=[1, 0, 0, 0], t=[0, 0, 0])


# ── umeyama ─────────────────────────────────────────────────────────────


def test_self_alignment_is_the_identity(rng):
    src = rng.normal(size=(20, 3))
    g = umeyama(src, src)
    assert abs(g.s - 1.0) < 1e-12
    assert np.allclose(g.R, np.eye(3), atol=1e-12)
    assert np.allclose(g.t, 0.0, atol=1e-12)


def test_planted_similarity_recovered_exactly(rng):
    src = rng.normal(size=(20, 3))
    R = _rz(30.0)
    dst = 2.5 * src @ R.T + np.array([1.0, -2.0, 3.0])
    g = umeyama(src, dst)
    assert abs(g.s - 2.5) < 1e-10
    assert np.allclose(g.R, R, atol=1e-10)
    assert np.allclose(g.t, [1.0, -2.0, 3.0], atol=1e-10)
    assert np.linalg.norm(g.apply(src) - dst, axis=1).max() < 1e-10


def test_recovery_across_random_transforms(rng):
    for _ in range(20):
        src = rng.normal(size=(15, 3))
        R = random_rotation(rng)
        s = float(np.exp(rng.normal()))
        t = rng.normal(size=3) * 3
        g = umeyama(src, s * src @ R.T + t)
        assert abs(g.s - s) < 1e-10 * s
        assert np.allclose(g.R, R, atol=1e-10)
        assert np.allclose(g.t, t, atol=1e-9)


def test_noisy_fit_beats_random_candidates_and_noise_floor(rng):
    src = rng.normal(size=(500, 3))
    R = _rz(-40.0)
    s, t = 1.3, np.array([0.5, 0.2, -1.0])
    sigma = 0.01
    noise = rng.normal(size=(500, 3))
    noise *= sigma / _rms(noise)          # empirical RMS exactly sigma
    dst = s * src @ R.T + t + noise

    g = umeyama(src, dst)
    fit_rms = _rms(g.apply(src) - dst)
    assert fit_rms <= sigma * (1 + 1e-6)

    # the closed form beats 1000 candidates: both small perturbations of
    # itself (local optimality) and arbitrary similarities (global sanity)
    from ggsfm import quat_from_axis_angle, quat_multiply
    for k in range(1000):
        if k % 2 == 0:
            dq = quat_from_axis_angle(rng.normal(size=3) * 1e-3)
            cand = Sim3(s=g.s * float(np.exp(rng.normal() * 1e-3)),
                        q=quat_multiply(dq, g.q),
                        t=g.t + rng.normal(size=3) * 1e-3)
        else:
            cand = Sim3(s=float(np.exp(rng.normal())),
                        q=rng.normal(size=4), t=rng.normal(size=3))
        assert _rms(cand.apply(src) - dst) >= fit_rms


def test_left_composition_consistency(rng):
    src = rng.normal(size=(30, 3))
    dst = 1.8 * src @ random_rotation(rng).T + rng.normal(size=3)
    g = Sim3(s=0.6, q=rng.normal(size=4), t=rng.normal(size=3))
    direct = umeyama(src, g.apply(dst))
    composed = g.compose(umeyama(src, dst))
    probe = rng.normal(size=(50, 3))
    assert np.allclose(direct.apply(probe), composed.apply(probe), atol=1e-9)


def test_reflection_is_never_returned(rng):
    # a planted reflection cannot be represented; the best proper rotation
    # must still come back with det +1
    src = rng.normal(size=(40, 3))
    dst = src.copy()
    dst[:, 2] *= -1.0
    g = umeyama(src, dst)
    assert np.linalg.det(g.R) > 0.999999


def test_degenerate_configurations_raise(rng):
    with pytest.raises(DegenerateConfiguration):
        umeyama(np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(DegenerateConfiguration):
        umeyama(rng.normal(size=(4, 3)), rng.normal(size=(5, 3)))
    with pytest.raises(DegenerateConfiguration):
        umeyama(np.ones((5, 3)), rng.normal(size=(5, 3)))  # coincident
    line = np.outer(np.arange(5, dtype=float), [1.0, 2.0, -1.0])
    with pytest.raises(DegenerateConfiguration):
        umeyama(line, rng.normal(size=(5, 3)))  # collinear


# ── robust_umeyama ──────────────────────────────────────────────────────


def _contaminated(rng, n=60, outlier_frac=0.3):
    src = rng.normal(size=(n, 3))
    R = random_rotation(rng)
    s = 1.4
    t = np.array([0.3, -0.6, 1.1])
    dst = s * src @ R.T + t
    n_out = int(round(outlier_frac * n))
    out_idx = rng.choice(n, size=n_out, replace=False)
    bump = rng.normal(size=(n_out, 3))
    bump = bump / np.linalg.norm(bump, axis=1, keepdims=True)
    dst[out_idx] += bump * (1.0 + rng.random(size=(n_out, 1)))
    clean = np.ones(n, dtype=bool)
    clean[out_idx] = False
    return src, dst, clean, Sim3(s=s, q=_quat_of(R), t=t)


def _quat_of(R):
    from ggsfm import quat_from_matrix
    return quat_from_matrix(R)


def test_thirty_percent_outliers_recovered_exactly():
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        src, dst, clean, truth = _contaminated(rng)
        g, mask = robust_umeyama(src, dst, max_err=1e-3,
                                 min_inlier_ratio=0.6, seed=seed)
        assert np.array_equal(mask, clean)
        assert abs(g.s - truth.s) < 1e-6
        assert np.allclose(g.R, truth.R, atol=1e-6)
        assert np.allclose(g.t, truth.t, atol=1e-6)


def test_unanimous_consensus_equals_plain_umeyama(rng):
    src = rng.normal(size=(25, 3))
    dst = 0.9 * src @ _rz(75.0).T + np.array([2.0, 0.0, -1.0])
    g, mask = robust_umeyama(src, dst, max_err=1e-6)
    ref = umeyama(src, dst)
    assert mask.all()
    assert g.s == ref.s
    assert np.array_equal(g.q, ref.q)
    assert np.array_equal(g.t, ref.t)


def test_half_outliers_fail_the_ratio_contract(rng):
    src, dst, _, _ = _contaminated(rng, n=40, outlier_frac=0.5)
    with pytest.raises(InsufficientInliers):
        robust_umeyama(src, dst, max_err=1e-3, min_inlier_ratio=0.8, seed=3)


def test_robust_fit_is_deterministic_for_a_seed(rng):
    src, dst, _, _ = _contaminated(rng)
    g1, m1 = robust_umeyama(src, dst, max_err=1e-3, seed=11,
                            min_inlier_ratio=0.5)
    g2, m2 = robust_umeyama(src, dst, max_err=1e-3, seed=11,
                            min_inlier_ratio=0.5)
    assert g1.s == g2.s
    assert np.array_equal(g1.q, g2.q)
    assert np.array_equal(g1.t, g2.t)
    assert np.array_equal(m1, m2)


def test_too_few_pairs_raise(rng):
    with pytest.raises(DegenerateConfiguration):
        robust_umeyama(rng.normal(size=(2, 3)), rng.normal(size=(2, 3)),
                       max_err=0.1)


# ── transform_camera ────────────────────────────────────────────────────


def test_moved_camera_projects_moved_points_identically(rng):
    cam = make_camera(q=rng.normal(size=4), t=[0.2, -0.4, 4.0])
    g = Sim3(s=1.9, q=rng.normal(size=4), t=rng.normal(size=3))
    moved = transform_camera(cam, g)
    xc = rng.normal(size=(30, 3))
    xc[:, 2] = 3.0 + rng.random(30)  # strictly in front of the camera
    pts = (xc - cam.t) @ cam.R
    uv_ref, z_ref = project_points(cam, pts)
    uv_new, z_new = project_points(moved, g.apply(pts))
    assert np.allclose(uv_new, uv_ref, atol=1e-9)
    assert np.allclose(z_new, g.s * z_ref, rtol=1e-12)


def test_transform_camera_preserves_intrinsics(rng):
    cam = make_camera()
    g = Sim3(s=0.7, q=rng.normal(size=4), t=rng.normal(size=3))
    assert np.array_equal(transform_camera(cam, g).f, cam.f)
