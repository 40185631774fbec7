"""Scene model: cameras, point-map grids and the pinhole projection.

Conventions used throughout the package:

* Quaternions are Hamilton ``(w, x, y, z)`` and unit-norm; they encode the
  world-to-camera rotation, i.e. ``x_cam = R(q) @ x_world + t``.
* Intrinsics are ``f = [fx, fy, cx, cy]`` with square-free pixels and no
  distortion; ``K = [[fx, 0, cx], [0, fy, cy], [0, 0, 1]]``.
* Pixel coordinates are ``(u, v)`` with ``u`` the column index and ``v`` the
  row index.  Pixel centers sit at integer coordinates and the origin is the
  top-left pixel, consistent with ``H x W`` grid indexing ``grid[v, u]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import CheiralityError, DimensionMismatch


class PixelCoord(NamedTuple):
    u: float  # column
    v: float  # row


# ---------------------------------------------------------------------------
# quaternion helpers (Hamilton convention, scalar first)
# ---------------------------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Return q scaled to unit norm."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise ValueError("cannot normalize a near-zero quaternion")
    return q / n


def quat_multiply(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Hamilton product q1 * q2; composes rotations R(q1) @ R(q2)."""
    w1, x1, y1, z1 = q1
    w2, x2, y2, z2 = q2
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (w, x, y, z)."""
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_axis_angle(omega: np.ndarray) -> np.ndarray:
    """Exponential map: axis-angle vector (rad) -> unit quaternion."""
    omega = np.asarray(omega, dtype=np.float64)
    angle = np.linalg.norm(omega)
    if angle < 1e-12:
        # first-order expansion keeps the map smooth through zero
        q = np.array([1.0, 0.5 * omega[0], 0.5 * omega[1], 0.5 * omega[2]])
        return q / np.linalg.norm(q)
    axis = omega / angle
    half = 0.5 * angle
    q = np.empty(4)
    q[0] = np.cos(half)
    q[1:] = np.sin(half) * axis
    return q


def quat_from_matrix(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) of a rotation matrix, w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(R[i, i] - R[j, j] - R[k, k] + 1.0, 0.0)) * 2.0
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def rotate(q: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Rotate point(s) x by the unit quaternion q.

    x may be a single 3-vector or an (..., 3) array.
    """
    R = quat_to_matrix(q)
    x = np.asarray(x, dtype=np.float64)
    return x @ R.T


# ---------------------------------------------------------------------------
# camera
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraParams:
    """One camera: world-to-camera pose plus pinhole intrinsics.

    q : (4,) unit quaternion (w, x, y, z), Hamilton convention
    t : (3,) translation, x_cam = R(q) x_world + t
    f : (4,) intrinsics [fx, fy, cx, cy], fx > 0 and fy > 0
    """

    q: np.ndarray
    t: np.ndarray
    f: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64).reshape(4)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        f = np.asarray(self.f, dtype=np.float64).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n < 1e-12:
            raise ValueError("quaternion norm too close to zero to normalize")
        if abs(n - 1.0) > 4 * np.finfo(np.float64).eps:
            q = q / n  # already-unit inputs pass through bit-identically
        if f[0] <= 0 or f[1] <= 0:
            raise ValueError("focal lengths must be positive")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "f", f)

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    @property
    def K(self) -> np.ndarray:
        fx, fy, cx, cy = self.f
        return np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])

    def center(self) -> np.ndarray:
        """Camera center in world coordinates, -R^T t."""
        return -self.R.T @ self.t


def project(camera: CameraParams, x: np.ndarray) -> PixelCoord:
    """Project one world point through the pinhole model.

    Raises CheiralityError when the point has non-positive depth.
    """
    xc = camera.R @ np.asarray(x, dtype=np.float64) + camera.t
    if xc[2] <= 0:
        raise CheiralityError(f"point maps to depth {xc[2]:.6g} <= 0")
    fx, fy, cx, cy = camera.f
    return PixelCoord(fx * xc[0] / xc[2] + cx, fy * xc[1] / xc[2] + cy)


def project_points(camera: CameraParams, pts: np.ndarray):
    """Vectorized projection of an (m, 3) array.

    Returns (uv, depth) with uv of shape (m, 2).  No cheirality check is
    applied; callers mask on depth themselves.  Entries with depth <= 0
    contain the algebraic ratio (or inf when depth == 0).
    """
    pts = np.asarray(pts, dtype=np.float64)
    xc = pts @ camera.R.T + camera.t
    z = xc[:, 2]
    fx, fy, cx, cy = camera.f
    with np.errstate(divide="ignore", invalid="ignore"):
        u = fx * xc[:, 0] / z + cx
        v = fy * xc[:, 1] / z + cy
    return np.stack([u, v], axis=1), z


# ---------------------------------------------------------------------------
# dense per-view point maps
# ---------------------------------------------------------------------------

@dataclass
class PointMapSet:
    """Per-view dense 3D point grids with confidence and validity.

    points     : (n_views, H, W, 3) float64
    confidence : (n_views, H, W) float64, >= 0
    valid      : (n_views, H, W) bool
    """

    points: np.ndarray
    confidence: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.confidence = np.asarray(self.confidence, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.points.ndim != 4 or self.points.shape[-1] != 3:
            raise DimensionMismatch("points must have shape (n, H, W, 3)")
        if self.confidence.shape != self.points.shape[:3]:
            raise DimensionMismatch("confidence shape must match points")
        if self.valid.shape != self.points.shape[:3]:
            raise DimensionMismatch("valid shape must match points")
        if np.any(self.confidence < 0):
            raise ValueError("confidence must be non-negative")
        if not np.all(np.isfinite(self.points[self.valid])):
            raise ValueError("valid entries must hold finite coordinates")

    @property
    def n_views(self) -> int:
        return self.points.shape[0]

    @property
    def shape(self):
        """(n_views, H, W)."""
        return self.points.shape[:3]

    def copy(self) -> "PointMapSet":
        return PointMapSet(self.points.copy(), self.confidence.copy(),
                           self.valid.copy())


__all__ = [
    "PixelCoord", "CameraParams", "PointMapSet",
    "project", "project_points", "rotate",
    "quat_normalize", "quat_multiply", "quat_conjugate", "quat_to_matrix",
    "quat_from_axis_angle", "quat_from_matrix",
]
