"""Sparse bundle adjustment.

Minimizes a robust reprojection objective over camera poses, intrinsics
and 3D points with Levenberg-Marquardt.  Rotations move by left-applied
axis-angle increments on the quaternion; the normal equations are reduced
by a Schur complement over the points.  The gauge is fixed by freezing one
camera's pose entirely and the norm of a second camera's translation.

Points behind a camera contribute a constant capped residual of 1e3 px
per component with zero Jacobian instead of failing, so transient
cheirality violations do not abort the solve.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CheiralityError, DegenerateProblem, NonFiniteCost
from .scene import CameraParams, project, quat_from_axis_angle, quat_multiply

_CAP = 1e3           # capped residual (px) for points behind a camera
_LAMBDA_MAX = 1e15   # damping ceiling before the solve gives up
_C_FLOOR = 1e-18     # absolute floor added to point-block diagonals


def cauchy(r2, scale: float = 1.0):
    """Cauchy robust loss on squared residual norms: s^2 log(1 + r2/s^2)."""
    s2 = scale * scale
    return s2 * np.log1p(np.asarray(r2, dtype=np.float64) / s2)


def residual(camera: CameraParams, point: np.ndarray,
             obs_uv: np.ndarray) -> np.ndarray:
    """Reprojection residual project(camera, point) - obs (2-vector, px)."""
    pix = project(camera, point)
    return np.array([pix.u, pix.v]) - np.asarray(obs_uv, dtype=np.float64)


def residual_and_jacobian(camera: CameraParams, point: np.ndarray,
                          obs_uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Residual plus its Jacobian in local coordinates.

    Columns of the (2, 13) Jacobian: axis-angle rotation increment (3),
    translation (3), intrinsics [fx, fy, cx, cy] (4), point (3).  The
    rotation increment acts on the left: R <- R(exp(omega)) @ R.
    """
    point = np.asarray(point, dtype=np.float64)
    R = camera.R
    y = R @ point
    xc = y + camera.t
    if xc[2] <= 0:
        raise CheiralityError("jacobian undefined behind the camera")
    fx, fy, cx, cy = camera.f
    X, Y, Z = xc
    iz = 1.0 / Z
    r = np.array([fx * X * iz + cx, fy * Y * iz + cy]) - np.asarray(obs_uv)
    dr_dxc = np.array([[fx * iz, 0.0, -fx * X * iz * iz],
                       [0.0, fy * iz, -fy * Y * iz * iz]])
    skew_y = np.array([[0.0, -y[2], y[1]],
                       [y[2], 0.0, -y[0]],
                       [-y[1], y[0], 0.0]])
    J = np.empty((2, 13))
    J[:, 0:3] = dr_dxc @ (-skew_y)
    J[:, 3:6] = dr_dxc
    J[:, 6:10] = np.array([[X * iz, 0.0, 1.0, 0.0],
                           [0.0, Y * iz, 0.0, 1.0]])
    J[:, 10:13] = dr_dxc @ R
    return r, J


@dataclass
class BAProblem:
    """Cameras, points and the tracks tying them together.

    points[j] is the initial estimate for tracks[j].  gauge names the
    camera whose pose is frozen and the camera whose translation norm is
    frozen, in that order.
    """

    cameras: list
    points: np.ndarray
    tracks: list
    loss_scale: float = 1.0
    gauge: tuple = (0, 1)
    refine_intrinsics: bool = True

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) != len(self.tracks):
            raise DegenerateProblem("one initial point per track required")


@dataclass
class BAReport:
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)
    max_residual: float = 0.0


# ---------------------------------------------------------------------------
# vectorized internals
# ---------------------------------------------------------------------------

def _quats_to_matrices(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((len(q), 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def _residuals(q, t, f, pts, cam_idx, pt_idx, obs):
    """Capped residuals (m, 2) plus camera-frame coordinates and flags."""
    R = _quats_to_matrices(q)
    xc = np.einsum("mij,mj->mi", R[cam_idx], pts[pt_idx]) + t[cam_idx]
    z = xc[:, 2]
    behind = z <= 0
    fo = f[cam_idx]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = fo[:, 0] * xc[:, 0] / z + fo[:, 2]
        v = fo[:, 1] * xc[:, 1] / z + fo[:, 3]
    r = np.stack([u, v], axis=1) - obs
    r[behind] = _CAP
    return r, xc, behind


def _cost(r, scale, loss):
    r2 = np.einsum("ma,ma->m", r, r)
    if loss == "cauchy":
        return float(np.sum(cauchy(r2, scale)))
    return float(np.sum(r2))


def _weights(r, scale, loss):
    if loss != "cauchy":
        return np.ones(len(r))
    r2 = np.einsum("ma,ma->m", r, r)
    s2 = scale * scale
    return s2 / (s2 + r2)


def _tangent_basis(t: np.ndarray) -> np.ndarray:
    """Two orthonormal directions perpendicular to t, as a (3, 2) matrix."""
    d = t / np.linalg.norm(t)
    a = np.zeros(3)
    a[int(np.argmin(np.abs(d)))] = 1.0
    e1 = np.cross(d, a)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(d, e1)
    return np.stack([e1, e2], axis=1)


def _camera_bases(n_cams, t, gauge, refine_intrinsics):
    """Per-camera (10, 10) basis matrices and the active-slot mask.

    Full slots: [omega 0:3 | t 3:6 | f 6:10].  The fixed camera loses all
    pose slots; the scale camera's translation moves only inside the plane
    orthogonal to its current translation, freezing its norm to first
    order (it is re-normalized exactly after each step).
    """
    fixed_cam, scale_cam = gauge
    B = np.zeros((n_cams, 10, 10))
    active = np.zeros((n_cams, 10), dtype=bool)
    for c in range(n_cams):
        if c == fixed_cam:
            pass
        elif c == scale_cam:
            B[c, 0:3, 0:3] = np.eye(3)
            active[c, 0:3] = True
            if np.linalg.norm(t[c]) > 1e-12:
                B[c, 3:6, 3:5] = _tangent_basis(t[c])
                active[c, 3:5] = True
        else:
            B[c, 0:3, 0:3] = np.eye(3)
            B[c, 3:6, 3:6] = np.eye(3)
            active[c, 0:6] = True
        if refine_intrinsics:
            B[c, 6:10, 6:10] = np.eye(4)
            active[c, 6:10] = True
    return B, active


def _apply_step(q, t, f, pts, delta_full, delta_p, gauge, t_scale_norm):
    qn = q.copy()
    tn = t + delta_full[:, 3:6]
    fn = f + delta_full[:, 6:10]
    for c in range(len(q)):
        om = delta_full[c, 0:3]
        if np.any(om):  # zero increments leave the quaternion bit-identical
            qn[c] = quat_multiply(quat_from_axis_angle(om), q[c])
            qn[c] = qn[c] / np.linalg.norm(qn[c])
    scale_cam = gauge[1]
    nrm = np.linalg.norm(tn[scale_cam])
    if t_scale_norm > 1e-12 and nrm > 1e-12:
        tn[scale_cam] *= t_scale_norm / nrm
    return qn, tn, fn, pts + delta_p


def solve(problem: BAProblem, max_iters: int = 100, tol: float = 1e-9,
          damping_init: float = 1e-3,
          loss: str = "cauchy") -> tuple[list, np.ndarray, BAReport]:
    """Levenberg-Marquardt with iteratively reweighted robust residuals.

    One iteration evaluates the Jacobians once and retries the damped
    linear step (growing the damping x10) until the true objective
    decreases; accepted steps shrink the damping x0.1.  The returned cost
    trace holds the accepted objective values and is monotone
    non-increasing.  Stops on relative improvement below tol, on
    max_iters, or when no damping level yields a decrease.

    Returns (cameras, points, report).  Raises DegenerateProblem for
    unusable problems and NonFiniteCost when the initial objective is not
    finite.
    """
    cams = problem.cameras
    n_cams = len(cams)
    if n_cams < 2:
        raise DegenerateProblem("need at least two cameras")
    if len(problem.tracks) == 0:
        raise DegenerateProblem("no tracks to adjust")
    fixed_cam, scale_cam = problem.gauge
    if not (0 <= fixed_cam < n_cams and 0 <= scale_cam < n_cams) \
            or fixed_cam == scale_cam:
        raise DegenerateProblem("gauge cameras invalid")
    for tr in problem.tracks:
        if np.any(tr.views < 0) or np.any(tr.views >= n_cams):
            raise DegenerateProblem("track references a missing camera")

    q = np.stack([c.q for c in cams])
    t = np.stack([c.t for c in cams])
    f = np.stack([c.f for c in cams])
    pts = problem.points.copy()
    scale = float(problem.loss_scale)

    cam_idx = np.concatenate([tr.views for tr in problem.tracks])
    pt_idx = np.concatenate([np.full(len(tr), j, dtype=np.int64)
                             for j, tr in enumerate(problem.tracks)])
    obs = np.concatenate([tr.uv for tr in problem.tracks])
    n_pts = len(pts)
    m = len(obs)

    r, xc, behind = _residuals(q, t, f, pts, cam_idx, pt_idx, obs)
    if np.all(behind):
        raise DegenerateProblem("every observation starts behind its camera")
    cost = _cost(r, scale, loss)
    if not np.isfinite(cost):
        raise NonFiniteCost(f"initial cost is {cost}")

    t_scale_norm = float(np.linalg.norm(t[scale_cam]))
    lam = float(damping_init)
    trace = [cost]
    converged = cost < 1e-30  # already at a perfect fixed point
    d10 = np.arange(10)
    d3 = np.arange(3)

    # observations arrive grouped per track, so per-point sums reduce over
    # contiguous runs; per-camera sums go through a one-hot matmul
    run_starts = np.r_[0, np.cumsum([len(tr) for tr in problem.tracks])[:-1]]
    cam_onehot = np.zeros((n_cams, m))
    cam_onehot[cam_idx, np.arange(m)] = 1.0

    # dense camera-point Schur factors fit comfortably for small scenes
    dense_schur = n_cams * 10 * n_pts * 3 * 8 <= 512 * 2 ** 20
    if not dense_schur:
        order = np.argsort(pt_idx, kind="stable")
        s_pt = pt_idx[order]
        bnds = np.r_[np.nonzero(np.r_[True, np.diff(s_pt) != 0])[0], m]
        parts_a, parts_b = [], []
        for bi in range(len(bnds) - 1):
            grp = order[bnds[bi]:bnds[bi + 1]]
            ga, gb = np.meshgrid(grp, grp, indexing="ij")
            parts_a.append(ga.ravel())
            parts_b.append(gb.ravel())
        pair_a = np.concatenate(parts_a)
        pair_b = np.concatenate(parts_b)

    it = 0
    while it < max_iters and not converged:
        it += 1

        # --- derivatives at the current estimate -------------------------
        w = _weights(r, scale, loss)
        w[behind] = 0.0  # capped residuals carry no gradient

        R = _quats_to_matrices(q)
        Robs = R[cam_idx]
        fo = f[cam_idx]
        z = xc[:, 2].copy()
        z[behind] = 1.0
        iz = 1.0 / z
        X, Y = xc[:, 0], xc[:, 1]
        dr_dxc = np.zeros((m, 2, 3))
        dr_dxc[:, 0, 0] = fo[:, 0] * iz
        dr_dxc[:, 0, 2] = -fo[:, 0] * X * iz * iz
        dr_dxc[:, 1, 1] = fo[:, 1] * iz
        dr_dxc[:, 1, 2] = -fo[:, 1] * Y * iz * iz
        y_vec = xc - t[cam_idx]
        sk = np.zeros((m, 3, 3))
        sk[:, 0, 1] = -y_vec[:, 2]
        sk[:, 0, 2] = y_vec[:, 1]
        sk[:, 1, 0] = y_vec[:, 2]
        sk[:, 1, 2] = -y_vec[:, 0]
        sk[:, 2, 0] = -y_vec[:, 1]
        sk[:, 2, 1] = y_vec[:, 0]
        Jc_full = np.zeros((m, 2, 10))
        Jc_full[:, :, 0:3] = -(dr_dxc @ sk)
        Jc_full[:, :, 3:6] = dr_dxc
        Jc_full[:, 0, 6] = X * iz
        Jc_full[:, 1, 7] = Y * iz
        Jc_full[:, 0, 8] = 1.0
        Jc_full[:, 1, 9] = 1.0
        Jp = dr_dxc @ Robs
        Jc_full[behind] = 0.0
        Jp[behind] = 0.0

        Bmat, active = _camera_bases(n_cams, t, problem.gauge,
                                     problem.refine_intrinsics)
        Jc = Jc_full @ Bmat[cam_idx]

        wr = r * w[:, None]
        JcT = Jc.transpose(0, 2, 1)
        Jpw = Jp * w[:, None, None]
        Hc = JcT @ (Jc * w[:, None, None])
        Cp = Jp.transpose(0, 2, 1) @ Jpw
        E = JcT @ Jpw
        g_cam = -(cam_onehot @ (JcT @ wr[:, :, None]).squeeze(-1))
        g_pt = -np.add.reduceat(
            (Jp.transpose(0, 2, 1) @ wr[:, :, None]).squeeze(-1),
            run_starts, axis=0)
        Bdiag = (cam_onehot @ Hc.reshape(m, 100)).reshape(n_cams, 10, 10)
        C = np.add.reduceat(Cp, run_starts, axis=0)

        # a vanishing gradient means we are already at a stationary point
        gnorm = max(float(np.abs(g_cam[active]).max(initial=0.0)),
                    float(np.abs(g_pt).max(initial=0.0)))
        if gnorm <= 1e-10 * (1.0 + cost):
            converged = True
            break

        if dense_schur:
            G = np.zeros((n_cams, 10, n_pts, 3))
            G[cam_idx, :, pt_idx, :] = E
            Gm = G.reshape(n_cams * 10, n_pts * 3)
            G2 = np.zeros_like(G)

        # --- damped steps until the true cost decreases ------------------
        accepted = False
        while True:
            Bd = Bdiag.copy()
            Bd[:, d10, d10] *= (1.0 + lam)
            Cd = C.copy()
            Cd[:, d3, d3] *= (1.0 + lam)
            Cd[:, d3, d3] += _C_FLOOR

            Cinv = np.linalg.inv(Cd)
            y_j = (Cinv @ g_pt[:, :, None]).squeeze(-1)

            S4 = np.zeros((n_cams, n_cams, 10, 10))
            if dense_schur:
                G2[cam_idx, :, pt_idx, :] = E @ Cinv[pt_idx]
                G2m = G2.reshape(n_cams * 10, n_pts * 3)
                S4 -= (Gm @ G2m.T).reshape(n_cams, 10, n_cams, 10) \
                    .transpose(0, 2, 1, 3)
            else:
                T = E[pair_a] @ Cinv[pt_idx[pair_a]]
                contrib = T @ E[pair_b].transpose(0, 2, 1)
                np.add.at(S4, (cam_idx[pair_a], cam_idx[pair_b]), -contrib)
            for c in range(n_cams):
                S4[c, c] += Bd[c]
            rhs = g_cam - cam_onehot @ (E @ y_j[pt_idx][:, :, None]).squeeze(-1)

            S = S4.transpose(0, 2, 1, 3).reshape(n_cams * 10, n_cams * 10)
            act = active.reshape(-1)
            dc_act = None
            try:
                dc_act = np.linalg.solve(S[np.ix_(act, act)],
                                         rhs.reshape(-1)[act])
            except np.linalg.LinAlgError:
                pass
            if dc_act is not None and np.all(np.isfinite(dc_act)):
                dc = np.zeros(n_cams * 10)
                dc[act] = dc_act
                dc = dc.reshape(n_cams, 10)

                acc = np.add.reduceat(
                    (E.transpose(0, 2, 1) @ dc[cam_idx][:, :, None])
                    .squeeze(-1), run_starts, axis=0)
                dp = (Cinv @ (g_pt - acc)[:, :, None]).squeeze(-1)

                delta_full = (Bmat @ dc[:, :, None]).squeeze(-1)
                q_c, t_c, f_c, pts_c = _apply_step(
                    q, t, f, pts, delta_full, dp, problem.gauge, t_scale_norm)
                if np.any(f_c[:, 0] <= 0) or np.any(f_c[:, 1] <= 0):
                    cand_cost = np.inf
                else:
                    r_c, xc_c, behind_c = _residuals(
                        q_c, t_c, f_c, pts_c, cam_idx, pt_idx, obs)
                    cand_cost = _cost(r_c, scale, loss)
                if np.isfinite(cand_cost) and cand_cost < cost:
                    rel = (cost - cand_cost) / max(cost, 1e-300)
                    q, t, f, pts = q_c, t_c, f_c, pts_c
                    r, xc, behind = r_c, xc_c, behind_c
                    cost = cand_cost
                    trace.append(cost)
                    lam = max(lam * 0.1, 1e-12)
                    accepted = True
                    if rel < tol or cost < 1e-30:
                        converged = True
                    break
            lam *= 10.0
            if lam > _LAMBDA_MAX:
                break
        if not accepted:
            # a vanishing gradient means a stationary point, not a stall
            gnorm = max(float(np.abs(g_cam[active]).max(initial=0.0)),
                        float(np.abs(g_pt).max(initial=0.0)))
            if gnorm <= 1e-10 * (1.0 + cost):
                converged = True
            break

    out_cams = [CameraParams(q=q[c], t=t[c], f=f[c]) for c in range(n_cams)]
    max_res = float(np.sqrt(np.einsum("ma,ma->m", r, r).max())) if m else 0.0
    report = BAReport(initial_cost=trace[0], final_cost=cost, iterations=it,
                      converged=converged, trace=trace, max_residual=max_res)
    return out_cams, pts, report
