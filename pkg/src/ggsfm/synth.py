"""Synthetic ground-truth scenes for exercising the full pipeline.

Scenes are desk scale: a unit box of random points plus a few planar
clusters, viewed by cameras on a ring looking at the cloud centroid.
Every random draw comes from a single counter-based Philox 4x64
generator seeded from the config, consumed in a fixed documented order
(points, camera heights, look-at jitters, correspondence noise, dropout,
outliers, drift phases, init perturbations), so a seed pins the scene
bit for bit.

Each point gets one anchor view (round-robin over views, first visible
fallback) and is nudged along its viewing ray so it projects exactly
onto the center of its anchor pixel. A point contributes matches only
when it owns the rounded pixel in both views involved (lowest point
index claims a pixel). The forward entry sits at the anchor pixel with
the exact continuous projection as target; the reverse grid holds the
anchor pixel center as a value-only entry (valid is False) so the
round-trip lookup is well defined without spawning a second, inexact
track from the other end. At zero noise every valid correspondence is
therefore exactly cycle consistent and the whole pipeline has the
ground truth as a fixed point.

Injected outliers point at uniform random pixels with confidence 0.9
and also spoof the reverse value at the rounded outlier pixel, making
them cycle-consistent: they survive match filtering and must be
absorbed by the robust loss downstream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .matching import CorrGraph
from .scene import (CameraParams, PixelCoord, PointMapSet,
                    quat_from_axis_angle, quat_from_matrix, quat_multiply)

_BOX_SIDE = 1.0        # world side length of the point box
_PLANE_FRAC = 0.3      # fraction of points placed on planar clusters
_N_PLANES = 3
_OUTLIER_CONF = 0.9    # high on purpose: outliers must pass the masks


@dataclass
class SynthConfig:
    n_views: int = 8
    n_points: int = 2000
    height: int = 48
    width: int = 64
    focal: float = 100.0
    ring_radius: float = 3.0
    lookat_jitter: float = 0.0
    pixel_noise: float = 0.0
    outlier_frac: float = 0.0
    dropout: float = 0.0
    drift_amplitude: float = 0.0
    drift_freq: float = 1.0
    init_rot_deg: float = 0.0
    init_trans_frac: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_views < 2:
            raise ConfigError("need at least two views")
        if self.n_points < 1:
            raise ConfigError("need at least one point")
        if self.height < 4 or self.width < 4:
            raise ConfigError("image grid too small")
        if self.focal <= 0 or self.ring_radius <= 0:
            raise ConfigError("focal and ring radius must be positive")
        for name in ("outlier_frac", "dropout"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.pixel_noise < 0 or self.lookat_jitter < 0 \
                or self.drift_amplitude < 0 or self.init_rot_deg < 0 \
                or self.init_trans_frac < 0:
            raise ConfigError("noise magnitudes must be non-negative")


@dataclass
class SyntheticScene:
    config: SynthConfig
    cameras: list
    points: np.ndarray
    maps: PointMapSet
    graph: CorrGraph
    init_cameras: list
    init_maps: PointMapSet
    owner: np.ndarray                  # (n, H, W) point index or -1
    anchor_view: np.ndarray            # (n_points,) view index or -1
    drift_phases: np.ndarray = field(default=None)

    @property
    def scene_scale(self) -> float:
        """3x the RMS spread of the ground-truth points."""
        d = self.points - self.points.mean(axis=0)
        return 3.0 * float(np.sqrt(np.einsum("ij,ij->", d, d)
                                   / len(self.points)))


def unproject(g: CameraParams, pix: PixelCoord, depth: float) -> np.ndarray:
    """World point whose projection in g is pix at the given depth."""
    if depth <= 0:
        raise ValueError("depth must be positive")
    fx, fy, cx, cy = g.f
    xc = np.array([(pix.u - cx) / fx * depth,
                   (pix.v - cy) / fy * depth,
                   depth])
    return g.R.T @ (xc - g.t)


def drift_field(x: np.ndarray, phase: np.ndarray, amplitude: float,
                freq: float = 1.0) -> np.ndarray:
    """Smooth sinusoidal displacement at world positions x.

    Component c oscillates along coordinate (c+1) mod 3:
    amplitude * sin(2 pi freq x_{c+1} / box_side + phase_c).
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    out = np.empty_like(x)
    for c in range(3):
        out[:, c] = amplitude * np.sin(
            2.0 * np.pi * freq * x[:, (c + 1) % 3] / _BOX_SIDE + phase[c])
    return out


def _lookat_rotation(center: np.ndarray, target: np.ndarray) -> np.ndarray:
    fwd = target - center
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, 0.0, 1.0])
    x = np.cross(fwd, up)
    n = np.linalg.norm(x)
    if n < 1e-9:  # looking straight along the vertical
        up = np.array([0.0, 1.0, 0.0])
        x = np.cross(fwd, up)
        n = np.linalg.norm(x)
    x = x / n
    y = np.cross(fwd, x)
    return np.stack([x, y, fwd])  # rows are camera axes in world frame


def _sample_points(rng, n_points: int) -> np.ndarray:
    n_plane = int(round(_PLANE_FRAC * n_points))
    n_box = n_points - n_plane
    pts = [rng.uniform(-0.5 * _BOX_SIDE, 0.5 * _BOX_SIDE, size=(n_box, 3))]
    per = [n_plane // _N_PLANES] * _N_PLANES
    per[-1] += n_plane - sum(per)
    for c in range(_N_PLANES):
        m = per[c]
        center = rng.uniform(-0.3, 0.3, size=3)
        sheet = rng.uniform(-0.2, 0.2, size=(m, 3))
        sheet[:, c % 3] = 0.0  # flat along one axis: a textureless wall
        pts.append(center + sheet)
    return np.concatenate(pts, axis=0)


def _project_all(cameras, pts):
    """Continuous projections (n_views, n_pts, 2) and depths."""
    n = len(cameras)
    uv = np.empty((n, len(pts), 2))
    z = np.empty((n, len(pts)))
    for i, cam in enumerate(cameras):
        xc = pts @ cam.R.T + cam.t
        z[i] = xc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv[i, :, 0] = cam.f[0] * xc[:, 0] / xc[:, 2] + cam.f[2]
            uv[i, :, 1] = cam.f[1] * xc[:, 1] / xc[:, 2] + cam.f[3]
    return uv, z


def _own_pixels(uv: np.ndarray, z: np.ndarray, h: int, w: int) -> np.ndarray:
    """Lowest point index claiming each rounded pixel wins. Returns
    (H, W) int64 owner grid, -1 where unclaimed."""
    owner = np.full((h, w), -1, dtype=np.int64)
    ru = np.rint(uv[:, 0]).astype(np.int64)
    rv = np.rint(uv[:, 1]).astype(np.int64)
    ok = (z > 0) & (ru >= 0) & (ru < w) & (rv >= 0) & (rv < h) \
        & np.all(np.isfinite(uv), axis=1)
    idx = np.nonzero(ok)[0]
    key = rv[idx] * w + ru[idx]
    order = np.lexsort((idx, key))
    key_s, idx_s = key[order], idx[order]
    first = np.r_[True, np.diff(key_s) != 0]
    owner.reshape(-1)[key_s[first]] = idx_s[first]
    return owner


def _assign_anchors(uv, z, h, w):
    """Anchor view per point: round-robin start, first view where the
    point lands in front and in bounds; -1 when nowhere visible."""
    n_views, n_pts = z.shape
    vis = (z > 0) & (uv[..., 0] > -0.5) & (uv[..., 0] < w - 0.5) \
        & (uv[..., 1] > -0.5) & (uv[..., 1] < h - 0.5)
    anchor = np.full(n_pts, -1, dtype=np.int64)
    for off in range(n_views):
        cand = (np.arange(n_pts) + off) % n_views
        take = (anchor < 0) & vis[cand, np.arange(n_pts)]
        anchor[take] = cand[take]
    return anchor


def generate(cfg: SynthConfig) -> SyntheticScene:
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    n, h, w = cfg.n_views, cfg.height, cfg.width

    pts = _sample_points(rng, cfg.n_points)
    centroid = pts.mean(axis=0)

    cameras = []
    heights = rng.uniform(-0.2, 0.2, size=n) * cfg.ring_radius
    jitters = rng.normal(size=(n, 3)) * cfg.lookat_jitter
    for i in range(n):
        th = 2.0 * np.pi * i / n
        center = np.array([cfg.ring_radius * np.cos(th),
                           cfg.ring_radius * np.sin(th), heights[i]])
        R = _lookat_rotation(center, centroid + jitters[i])
        q = quat_from_matrix(R)
        t = -R @ center
        f = np.array([cfg.focal, cfg.focal, (w - 1) / 2.0, (h - 1) / 2.0])
        cameras.append(CameraParams(q=q, t=t, f=f))

    # snap each point along its anchor ray onto the anchor pixel center
    uv, z = _project_all(cameras, pts)
    anchor = _assign_anchors(uv, z, h, w)
    for a in range(n):
        sel = np.nonzero(anchor == a)[0]
        if len(sel) == 0:
            continue
        cam = cameras[a]
        pix = np.rint(uv[a, sel])
        depth = z[a, sel]
        xc = np.stack([(pix[:, 0] - cam.f[2]) / cam.f[0] * depth,
                       (pix[:, 1] - cam.f[3]) / cam.f[1] * depth,
                       depth], axis=1)
        pts[sel] = (xc - cam.t) @ cam.R

    uv, z = _project_all(cameras, pts)
    owner = np.stack([_own_pixels(uv[i], z[i], h, w) for i in range(n)])

    gt_points_grid = np.zeros((n, h, w, 3))
    gt_valid = owner >= 0
    for i in range(n):
        sel = gt_valid[i]
        gt_points_grid[i][sel] = pts[owner[i][sel]]
    maps = PointMapSet(points=gt_points_grid,
                       confidence=gt_valid.astype(np.float64),
                       valid=gt_valid)

    # per point the pixel it owns in each view, -1 when occluded or unseen
    own_pix = np.full((n, len(pts), 2), -1, dtype=np.int64)
    for i in range(n):
        vv, uu = np.nonzero(gt_valid[i])
        own_pix[i, owner[i, vv, uu], 0] = uu
        own_pix[i, owner[i, vv, uu], 1] = vv

    target = {(i, k): np.zeros((h, w, 2)) for i in range(n)
              for k in range(n) if i != k}
    conf = {pr: np.zeros((h, w)) for pr in target}
    valid = {pr: np.zeros((h, w), dtype=bool) for pr in target}
    pairs = sorted(target)

    # a point claims only the rounded pixel, so owning any pixel in the
    # anchor view means owning exactly the anchor pixel
    anchored = (anchor >= 0) \
        & (own_pix[np.maximum(anchor, 0), np.arange(len(pts)), 0] >= 0)
    for a in range(n):
        sel = np.nonzero(anchored & (anchor == a))[0]
        if len(sel) == 0:
            continue
        au = own_pix[a, sel, 0]
        av = own_pix[a, sel, 1]
        for k in range(n):
            if k == a:
                continue
            has = own_pix[k, sel, 0] >= 0
            p_sel, fu, fv = sel[has], au[has], av[has]
            target[(a, k)][fv, fu] = uv[k, p_sel]
            conf[(a, k)][fv, fu] = 1.0
            valid[(a, k)][fv, fu] = True
            bu = own_pix[k, p_sel, 0]
            bv = own_pix[k, p_sel, 1]
            # value-only reverse entries close the round trip exactly
            target[(k, a)][bv, bu, 0] = fu
            target[(k, a)][bv, bu, 1] = fv

    # pixel noise with confidence tied to the drawn magnitude
    if cfg.pixel_noise > 0:
        s2 = cfg.pixel_noise ** 2
        for pr in pairs:
            m = valid[pr]
            noise = rng.normal(0.0, cfg.pixel_noise, size=(int(m.sum()), 2))
            target[pr][m] += noise
            conf[pr][m] = np.exp(-np.einsum("ij,ij->i", noise, noise)
                                 / (2.0 * s2))

    if cfg.dropout > 0:
        for pr in pairs:
            m = valid[pr]
            keep = rng.random(int(m.sum())) >= cfg.dropout
            vv, uu = np.nonzero(m)
            valid[pr][vv[~keep], uu[~keep]] = False

    # adversarial outliers: random target, high confidence, and a spoofed
    # reverse value so the corruption is cycle-consistent
    if cfg.outlier_frac > 0:
        spoofs = []
        for (i, k) in pairs:
            m = valid[(i, k)]
            vv, uu = np.nonzero(m)
            n_out = int(round(cfg.outlier_frac * len(vv)))
            if n_out == 0:
                continue
            pick = rng.choice(len(vv), size=n_out, replace=False)
            bogus = np.stack([rng.uniform(0, w - 1, size=n_out),
                              rng.uniform(0, h - 1, size=n_out)], axis=1)
            target[(i, k)][vv[pick], uu[pick]] = bogus
            conf[(i, k)][vv[pick], uu[pick]] = _OUTLIER_CONF
            ru = np.rint(bogus[:, 0]).astype(np.int64)
            rv = np.rint(bogus[:, 1]).astype(np.int64)
            back = np.stack([uu[pick], vv[pick]], axis=1).astype(np.float64)
            spoofs.append(((k, i), rv, ru, back))
        for (pr, rv, ru, back) in spoofs:
            target[pr][rv, ru] = back
            conf[pr][rv, ru] = _OUTLIER_CONF

    graph = CorrGraph(n_views=n, H=h, W=w, target=target, conf=conf,
                      valid=valid)

    # drifted dense initialization emulating a feed-forward predictor
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(n, 3))
    drift_pts = gt_points_grid.copy()
    for i in range(n):
        sel = gt_valid[i]
        if cfg.drift_amplitude > 0 and np.any(sel):
            drift_pts[i][sel] += drift_field(
                gt_points_grid[i][sel], phases[i], cfg.drift_amplitude,
                cfg.drift_freq)
    init_maps = PointMapSet(points=drift_pts,
                            confidence=gt_valid.astype(np.float64),
                            valid=gt_valid.copy())

    init_cameras = []
    axes = rng.normal(size=(n, 3))
    dirs = rng.normal(size=(n, 3))
    for i, cam in enumerate(cameras):
        q, t = cam.q, cam.t
        if cfg.init_rot_deg > 0:
            ax = axes[i] / np.linalg.norm(axes[i])
            dq = quat_from_axis_angle(ax * np.deg2rad(cfg.init_rot_deg))
            q = quat_multiply(dq, q)
        if cfg.init_trans_frac > 0:
            d = dirs[i] / np.linalg.norm(dirs[i])
            t = t + cfg.init_trans_frac * np.linalg.norm(t) * d
        init_cameras.append(CameraParams(q=q, t=t, f=cam.f.copy()))

    return SyntheticScene(config=cfg, cameras=cameras, points=pts, maps=maps,
                          graph=graph, init_cameras=init_cameras,
                          init_maps=init_maps, owner=owner,
                          anchor_view=anchor, drift_phases=phases)
