"""Shared fixtures and small geometry helpers for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from ggsfm import CameraParams, quat_from_axis_angle


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform-ish random rotation via QR with positive determinant."""
    A = rng.normal(size=(3, 3))
    Q, R = np.linalg.qr(A)
    Q *= np.sign(np.diag(R))
    if np.linalg.det(Q) < 0:
        Q[:, 0] = -Q[:, 0]
    return Q


def random_quaternion(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def make_camera(q=None, t=None, f=None) -> CameraParams:
    if q is None:
        q = np.array([1.0, 0.0, 0.0, 0.0])
    if t is None:
        t = np.zeros(3)
    if f is None:
        f = np.array([100.0, 100.0, 32.0, 24.0])
    return CameraParams(q=np.asarray(q, dtype=np.float64),
                        t=np.asarray(t, dtype=np.float64),
                        f=np.asarray(f, dtype=np.float64))


def lookat_camera(center: np.ndarray, target: np.ndarray,
                  f=None) -> CameraParams:
    """World-to-camera pose with +z toward the target, arbitrary roll."""
    center = np.asarray(center, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - center
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, 0.0, 1.0])
    if abs(fwd @ up) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    x = np.cross(fwd, up)
    x /= np.linalg.norm(x)
    y = np.cross(fwd, x)
    R = np.stack([x, y, fwd])
    from ggsfm import quat_from_matrix
    return make_camera(q=quat_from_matrix(R), t=-R @ center, f=f)


def max_relative_rotation_deg(pred, gt) -> float:
    """Worst relative-rotation angle over all ordered camera pairs."""
    worst = 0.0
    for i in range(len(pred)):
        for k in range(len(pred)):
            if i == k:
                continue
            Rp = pred[i].R @ pred[k].R.T
            Rg = gt[i].R @ gt[k].R.T
            c = (np.trace(Rp @ Rg.T) - 1.0) / 2.0
            worst = max(worst, np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))
    return worst


def perturbed(camera: CameraParams, rng: np.random.Generator,
              rot_deg: float, trans_frac: float) -> CameraParams:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    dq = quat_from_axis_angle(axis * np.radians(rot_deg))
    from ggsfm import quat_multiply
    dirn = rng.normal(size=3)
    dirn /= np.linalg.norm(dirn)
    t = camera.t + trans_frac * np.linalg.norm(camera.t) * dirn
    return CameraParams(q=quat_multiply(dq, camera.q), t=t, f=camera.f.copy())


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240817)
