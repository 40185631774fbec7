"""Multi-view DLT triangulation and guided-cloud construction.

Each track is triangulated by the direct linear transform: every
observation (u, v) in view k with projection matrix P = K [R | t]
contributes the two rows ``u * P[2] - P[0]`` and ``v * P[2] - P[1]``.
Rows are normalized to unit norm and the homogeneous point is the right
singular vector of the smallest singular value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometry
from .matching import CorrGraph, Track, build_tracks
from .scene import CameraParams, project_points

_W_EPS = 1e-12          # homogeneous scale below which a point is at infinity
_RANK_EPS = 1e-12       # second-smallest singular value below this: no unique point


def _projection_matrix(camera: CameraParams) -> np.ndarray:
    P = np.empty((3, 4))
    P[:, :3] = camera.R
    P[:, 3] = camera.t
    return camera.K @ P


def dlt_point(track: Track, cameras: list[CameraParams]) -> tuple[np.ndarray, float]:
    """Triangulate one track.

    Returns (point, condition) where condition is the ratio of the two
    smallest singular values of the row-normalized design matrix (near
    zero for well-determined noiseless geometry).

    Raises DegenerateGeometry when the rays leave the point undetermined
    or push it to infinity.
    """
    rows = np.empty((2 * len(track), 4))
    for j, (k, (u, v)) in enumerate(zip(track.views, track.uv)):
        P = _projection_matrix(cameras[int(k)])
        rows[2 * j] = u * P[2] - P[0]
        rows[2 * j + 1] = v * P[2] - P[1]
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    rows = rows / np.maximum(norms, 1e-300)
    _, s, Vt = np.linalg.svd(rows)
    if s[-2] <= _RANK_EPS:
        raise DegenerateGeometry("observation rays do not determine a point")
    x = Vt[-1]
    if abs(x[3]) < _W_EPS:
        raise DegenerateGeometry("triangulated point lies at infinity")
    return x[:3] / x[3], float(s[-1] / s[-2])


def triangulation_angle(point: np.ndarray, cameras: list[CameraParams],
                        views: np.ndarray, aggregate: str = "max") -> float:
    """Pairwise ray-separation angle at a point, in degrees.

    The default aggregates with max over all view pairs; "min" gives the
    most conservative pair instead.
    """
    point = np.asarray(point, dtype=np.float64)
    centers = np.stack([cameras[int(k)].center() for k in views])
    ang = _pairwise_angles(point[None, :], centers[None, :, :], aggregate)
    return float(ang[0])


def _pairwise_angles(points: np.ndarray, centers: np.ndarray,
                     aggregate: str) -> np.ndarray:
    """Aggregated ray angles for (B, 3) points with (B, m, 3) centers."""
    m = centers.shape[1]
    if m < 2:
        return np.zeros(len(points))
    dirs = points[:, None, :] - centers
    norms = np.linalg.norm(dirs, axis=2)
    dirs = dirs / np.maximum(norms, 1e-300)[..., None]
    cosines = np.clip(np.einsum("bmi,bni->bmn", dirs, dirs), -1.0, 1.0)
    iu, ik = np.triu_indices(m, k=1)
    angles = np.degrees(np.arccos(cosines[:, iu, ik]))
    if aggregate == "max":
        return angles.max(axis=1)
    if aggregate == "min":
        return angles.min(axis=1)
    raise ValueError(f"unknown angle aggregate {aggregate!r}")


@dataclass
class GuidedCloud:
    """Sparse filtered 3D points scattered onto integer pixels.

    points     : (M, 3) final point positions (collision groups averaged)
    assoc      : per point, (m_i, 3) int array of (view, u, v) pixel links
    max_reproj : (M,) max reprojection error over the member observations
    max_angle  : (M,) aggregated pairwise triangulation angle (deg)
    lookup     : (n_views, H, W) int64 point index per pixel, -1 where empty
    """

    points: np.ndarray
    assoc: list
    max_reproj: np.ndarray
    max_angle: np.ndarray
    lookup: np.ndarray

    def __len__(self) -> int:
        return len(self.points)

    def assoc_rows(self) -> np.ndarray:
        """Flattened (point_id, view, u, v) rows for serialization."""
        rows = []
        for pid, a in enumerate(self.assoc):
            for view, u, v in a:
                rows.append((pid, view, u, v))
        return np.array(rows, dtype=np.int64).reshape(-1, 4)

    @staticmethod
    def from_assoc_rows(points: np.ndarray, rows: np.ndarray,
                        n_views: int, h: int, w: int,
                        max_reproj: np.ndarray | None = None,
                        max_angle: np.ndarray | None = None) -> "GuidedCloud":
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        assoc: list[list] = [[] for _ in range(len(points))]
        lookup = np.full((n_views, h, w), -1, dtype=np.int64)
        for pid, view, u, v in np.asarray(rows, dtype=np.int64).reshape(-1, 4):
            assoc[pid].append((view, u, v))
            lookup[view, v, u] = pid
        m = len(points)
        return GuidedCloud(
            points=points,
            assoc=[np.array(a, dtype=np.int64).reshape(-1, 3) for a in assoc],
            max_reproj=np.zeros(m) if max_reproj is None else np.asarray(max_reproj),
            max_angle=np.zeros(m) if max_angle is None else np.asarray(max_angle),
            lookup=lookup)


def _batched_triangulate(tracks: list[Track], cameras: list[CameraParams]):
    """DLT for many tracks, batched by observation count.

    Returns (points (T, 3), ok (T,) bool); degenerate tracks get ok=False.
    """
    n_tracks = len(tracks)
    points = np.zeros((n_tracks, 3))
    ok = np.zeros(n_tracks, dtype=bool)
    by_m: dict[int, list[int]] = {}
    for j, tr in enumerate(tracks):
        by_m.setdefault(len(tr), []).append(j)
    P_all = np.stack([_projection_matrix(c) for c in cameras])
    for m, idxs in sorted(by_m.items()):
        views = np.stack([tracks[j].views for j in idxs])     # (B, m)
        uv = np.stack([tracks[j].uv for j in idxs])           # (B, m, 2)
        P = P_all[views]                                      # (B, m, 3, 4)
        rows = np.empty((len(idxs), 2 * m, 4))
        rows[:, 0::2] = uv[..., 0:1] * P[:, :, 2, :] - P[:, :, 0, :]
        rows[:, 1::2] = uv[..., 1:2] * P[:, :, 2, :] - P[:, :, 1, :]
        norms = np.linalg.norm(rows, axis=2, keepdims=True)
        rows = rows / np.maximum(norms, 1e-300)
        _, s, Vt = np.linalg.svd(rows)
        x = Vt[:, -1, :]                                      # (B, 4)
        good = (s[:, -2] > _RANK_EPS) & (np.abs(x[:, 3]) >= _W_EPS)
        idxs = np.asarray(idxs)
        sol = np.zeros((len(idxs), 3))
        sol[good] = x[good, :3] / x[good, 3:4]
        points[idxs] = sol
        ok[idxs] = good
    return points, ok


def _project_flat(points: np.ndarray, item: np.ndarray, views: np.ndarray,
                  cameras: list[CameraParams]):
    """Project points[item] into views, grouped by view for speed.

    Returns (uv (m, 2), depth (m,)).
    """
    uv = np.empty((len(item), 2))
    depth = np.empty(len(item))
    for k in range(len(cameras)):
        sel = views == k
        if not np.any(sel):
            continue
        uv[sel], depth[sel] = project_points(cameras[k], points[item[sel]])
    return uv, depth


def _max_reproj_per_item(points: np.ndarray, n_items: int, item: np.ndarray,
                         views: np.ndarray, uv_obs: np.ndarray,
                         cameras: list[CameraParams]):
    """Max reprojection error per item; inf when any view sees it behind."""
    uv_pred, depth = _project_flat(points, item, views, cameras)
    err = np.linalg.norm(uv_pred - uv_obs, axis=1)
    err[depth <= 0] = np.inf
    err[~np.isfinite(err)] = np.inf
    out = np.zeros(n_items)
    np.maximum.at(out, item, err)
    return out, uv_pred, depth


def _angles_per_item(points: np.ndarray, views_per_item: list[np.ndarray],
                     cameras: list[CameraParams], aggregate: str) -> np.ndarray:
    centers = np.stack([c.center() for c in cameras])
    out = np.zeros(len(views_per_item))
    by_m: dict[int, list[int]] = {}
    for j, vws in enumerate(views_per_item):
        by_m.setdefault(len(vws), []).append(j)
    for m, idxs in sorted(by_m.items()):
        if m < 2:
            continue
        vstack = np.stack([views_per_item[j] for j in idxs])
        out[idxs] = _pairwise_angles(points[idxs], centers[vstack], aggregate)
    return out


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, a: int) -> int:
        p = self.parent
        while p[a] != a:
            p[a] = p[p[a]]
            a = p[a]
        return a

    def union(self, a: int, b: int):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra


def triangulate_all(graph: CorrGraph, cameras: list[CameraParams],
                    max_reproj: float = 4.0, min_max_angle: float = 3.0,
                    angle_aggregate: str = "max") -> GuidedCloud:
    """Triangulate every track of a masked graph into a guided cloud.

    Tracks are built from the graph, triangulated by DLT, then filtered:
    a point is discarded when its maximum reprojection error over the
    visible views exceeds max_reproj or when its aggregated pairwise
    triangulation angle falls below min_max_angle.  Survivors are
    projected back into their views and assigned to the rounded integer
    pixels; points colliding on a pixel are merged and averaged (in track
    order) and must still satisfy both filters afterwards, so the stored
    diagnostics always hold for the final points.  Points left with fewer
    than two pixel associations are dropped.
    """
    h, w, n_views = graph.H, graph.W, graph.n_views
    empty = GuidedCloud(points=np.zeros((0, 3)), assoc=[],
                        max_reproj=np.zeros(0), max_angle=np.zeros(0),
                        lookup=np.full((n_views, h, w), -1, dtype=np.int64))
    tracks = build_tracks(graph)
    if not tracks:
        return empty

    pts, ok = _batched_triangulate(tracks, cameras)

    # flat observation arrays, track-major
    obs_item = np.concatenate([np.full(len(tr), j) for j, tr in enumerate(tracks)])
    obs_view = np.concatenate([tr.views for tr in tracks])
    obs_uv = np.concatenate([tr.uv for tr in tracks])

    max_err, proj_uv, depth = _max_reproj_per_item(
        pts, len(tracks), obs_item, obs_view, obs_uv, cameras)
    max_err[~ok] = np.inf
    angles = _angles_per_item(pts, [tr.views for tr in tracks], cameras,
                              angle_aggregate)
    keep = ok & (max_err <= max_reproj) & (angles >= min_max_angle)
    survivors = np.nonzero(keep)[0]
    if len(survivors) == 0:
        return empty
    surv_pos = np.full(len(tracks), -1)
    surv_pos[survivors] = np.arange(len(survivors))

    # scatter: claim the rounded reprojection pixel of each observation
    obs_keep = keep[obs_item] & (depth > 0)
    ru = np.rint(proj_uv[:, 0]).astype(np.int64)
    rv = np.rint(proj_uv[:, 1]).astype(np.int64)
    obs_keep &= (ru >= 0) & (ru < w) & (rv >= 0) & (rv < h)
    c_sidx = surv_pos[obs_item[obs_keep]]
    c_key = (obs_view[obs_keep] * h + rv[obs_keep]) * w + ru[obs_keep]

    order = np.argsort(c_key, kind="stable")
    c_key, c_sidx = c_key[order], c_sidx[order]
    uf = _UnionFind(len(survivors))
    starts = np.nonzero(np.r_[True, np.diff(c_key) != 0])[0]
    bounds = np.r_[starts, len(c_key)]
    for b in range(len(starts)):
        members = c_sidx[bounds[b]:bounds[b + 1]]
        for other in members[1:]:
            uf.union(int(members[0]), int(other))

    groups: dict[int, list[int]] = {}
    for s_idx in range(len(survivors)):
        groups.setdefault(uf.find(s_idx), []).append(s_idx)
    group_list = [sorted(groups[r]) for r in sorted(groups)]

    # averaged positions, accumulated in track order
    g_pts = np.zeros((len(group_list), 3))
    for g, members in enumerate(group_list):
        acc = np.zeros(3)
        for s_idx in members:
            acc = acc + pts[survivors[s_idx]]
        g_pts[g] = acc / len(members)

    # pixel sets per group
    group_of_sidx = np.empty(len(survivors), dtype=np.int64)
    for g, members in enumerate(group_list):
        group_of_sidx[members] = g
    pixel_sets: list[set] = [set() for _ in group_list]
    for key, s_idx in zip(c_key, c_sidx):
        pixel_sets[group_of_sidx[s_idx]].add(int(key))

    # recompute diagnostics of the averaged points over member observations
    surv_track = survivors  # survivor -> track index
    g_obs_item_parts, g_obs_view_parts, g_obs_uv_parts = [], [], []
    views_per_group: list[np.ndarray] = []
    for g, members in enumerate(group_list):
        vset = set()
        for s_idx in members:
            tr = tracks[surv_track[s_idx]]
            g_obs_item_parts.append(np.full(len(tr), g))
            g_obs_view_parts.append(tr.views)
            g_obs_uv_parts.append(tr.uv)
            vset.update(int(k) for k in tr.views)
        views_per_group.append(np.array(sorted(vset), dtype=np.int64))
    g_obs_item = np.concatenate(g_obs_item_parts)
    g_obs_view = np.concatenate(g_obs_view_parts)
    g_obs_uv = np.concatenate(g_obs_uv_parts)
    g_err, _, _ = _max_reproj_per_item(g_pts, len(group_list), g_obs_item,
                                       g_obs_view, g_obs_uv, cameras)
    g_ang = _angles_per_item(g_pts, views_per_group, cameras, angle_aggregate)

    final_pts, final_assoc, final_reproj, final_angle = [], [], [], []
    for g in range(len(group_list)):
        if len(pixel_sets[g]) < 2:
            continue
        if g_err[g] > max_reproj or g_ang[g] < min_max_angle:
            continue
        rows = []
        for key in sorted(pixel_sets[g]):
            view, rem = divmod(key, h * w)
            v, u = divmod(rem, w)
            rows.append((view, u, v))
        final_pts.append(g_pts[g])
        final_assoc.append(np.array(rows, dtype=np.int64).reshape(-1, 3))
        final_reproj.append(float(g_err[g]))
        final_angle.append(float(g_ang[g]))

    if not final_pts:
        return empty
    lookup = np.full((n_views, h, w), -1, dtype=np.int64)
    for pid, a in enumerate(final_assoc):
        for view, u, v in a:
            lookup[view, v, u] = pid
    return GuidedCloud(points=np.stack(final_pts), assoc=final_assoc,
                       max_reproj=np.array(final_reproj),
                       max_angle=np.array(final_angle), lookup=lookup)
