"""Similarity alignment between 3D point sets.

Provides the closed-form least-squares similarity (scale, rotation,
translation) between paired point sets and a RANSAC-robust variant for
contaminated pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateConfiguration, InsufficientInliers
from .scene import (CameraParams, quat_conjugate, quat_from_matrix,
                    quat_multiply, quat_normalize, quat_to_matrix)


@dataclass(frozen=True)
class Sim3:
    """Similarity transform x -> s * R(q) @ x + t with s > 0."""

    s: float
    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        if not self.s > 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "q", quat_normalize(np.asarray(self.q, dtype=np.float64)))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return self.s * (pts @ self.R.T) + self.t

    def inverse(self) -> "Sim3":
        Rt = self.R.T
        return Sim3(s=1.0 / self.s, q=quat_conjugate(self.q),
                    t=-(Rt @ self.t) / self.s)

    def compose(self, other: "Sim3") -> "Sim3":
        """Returns the transform equivalent to applying other, then self."""
        return Sim3(s=self.s * other.s,
                    q=quat_multiply(self.q, other.q),
                    t=self.s * (self.R @ other.t) + self.t)

    def matrix(self) -> np.ndarray:
        """3x4 matrix [s*R | t] acting on homogeneous points."""
        m = np.empty((3, 4))
        m[:, :3] = self.s * self.R
        m[:, 3] = self.t
        return m

    @staticmethod
    def identity() -> "Sim3":
        return Sim3(s=1.0, q=np.array([1.0, 0, 0, 0]), t=np.zeros(3))


def umeyama(src: np.ndarray, dst: np.ndarray) -> Sim3:
    """Least-squares similarity aligning src onto dst.

    Closed-form solution via the SVD of the cross-covariance, with the
    determinant sign corrected so the rotation is proper.  Requires at
    least three non-collinear pairs.

    Raises DegenerateConfiguration for too few, coincident or collinear
    points.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape:
        raise DegenerateConfiguration("src and dst must pair one-to-one")
    n = len(src)
    if n < 3:
        raise DegenerateConfiguration(f"need at least 3 pairs, got {n}")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    var_s = float(np.mean(np.sum(xs * xs, axis=1)))
    if var_s < 1e-24:
        raise DegenerateConfiguration("source points are coincident")
    cov = (xd.T @ xs) / n
    U, D, Vt = np.linalg.svd(cov)
    # rank(cov) must be >= 2, otherwise the rotation is not determined
    if D[1] <= 1e-12 * max(D[0], 1e-300):
        raise DegenerateConfiguration("point configuration is collinear")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S)) / var_s
    if not s > 0:
        raise DegenerateConfiguration("non-positive similarity scale")
    t = mu_d - s * (R @ mu_s)
    return Sim3(s=s, q=quat_from_matrix(R), t=t)


def robust_umeyama(src: np.ndarray, dst: np.ndarray, max_err: float,
                   min_inlier_ratio: float = 0.8, seed: int = 0,
                   confidence: float = 0.999,
                   max_iters: int = 10000) -> tuple[Sim3, np.ndarray]:
    """RANSAC similarity estimation over contaminated pairs.

    Minimal 3-point hypotheses are scored by the count of pairs with
    residual strictly below max_err.  The best hypothesis (earliest wins
    ties) is refit on its inliers, followed by exactly one inlier
    re-classification pass.  The iteration count adapts to the observed
    inlier ratio at the given confidence, capped at max_iters.  Fully
    deterministic for a fixed seed (Philox counter-based generator).

    Returns (sim3, inlier_mask).  Raises InsufficientInliers when the
    final inlier ratio falls below min_inlier_ratio.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape:
        raise DegenerateConfiguration("src and dst must pair one-to-one")
    n = len(src)
    if n < 3:
        raise DegenerateConfiguration(f"need at least 3 pairs, got {n}")

    rng = np.random.Generator(np.random.Philox(seed))
    best_count = 0
    best_mask: np.ndarray | None = None
    needed = max_iters
    it = 0
    while it < min(needed, max_iters):
        idx = rng.choice(n, size=3, replace=False)
        it += 1
        try:
            model = umeyama(src[idx], dst[idx])
        except DegenerateConfiguration:
            continue
        err = np.linalg.norm(model.apply(src) - dst, axis=1)
        mask = err < max_err
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
            w = count / n
            if w >= 1.0:
                break
            denom = math.log1p(-min(w ** 3, 1 - 1e-12))
            needed = int(math.ceil(math.log(1.0 - confidence) / denom))
    if best_mask is None or best_count < 3:
        raise InsufficientInliers("no 3-point hypothesis produced inliers")

    try:
        model = umeyama(src[best_mask], dst[best_mask])
    except DegenerateConfiguration as exc:
        raise InsufficientInliers(f"inlier refit degenerate: {exc}") from exc
    # single re-classification pass against the refit model
    err = np.linalg.norm(model.apply(src) - dst, axis=1)
    final_mask = err < max_err
    ratio = final_mask.sum() / n
    if ratio < min_inlier_ratio:
        raise InsufficientInliers(
            f"inlier ratio {ratio:.3f} below required {min_inlier_ratio:.3f}")
    return model, final_mask


def transform_camera(camera: CameraParams, sim3: Sim3) -> CameraParams:
    """Re-express a world-to-camera pose after the world moves by sim3.

    The returned camera projects sim3.apply(x) to the same pixel the input
    camera gave for x, with depths scaled by sim3.s.
    """
    Rn = camera.R @ sim3.R.T
    tn = sim3.s * camera.t - Rn @ sim3.t
    return CameraParams(q=quat_multiply(camera.q, quat_conjugate(sim3.q)),
                        t=tn, f=camera.f.copy())
