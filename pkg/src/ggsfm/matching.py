"""Pairwise correspondence graphs and track construction.

A correspondence graph stores, for every ordered view pair ``(i, k)``, a
dense grid mapping each pixel of view ``i`` to a continuous pixel location
in view ``k`` together with a confidence in ``[0, 1]`` and a validity bit.
Grids are indexed ``grid[v, u]`` (row, column); targets store ``(u, v)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DimensionMismatch, ThresholdOrderError

# Scharr 3x3 derivative kernels (x = column direction), 1/32 normalization.
_SCHARR_X = np.array([[-3, 0, 3], [-10, 0, 10], [-3, 0, 3]], dtype=np.float64) / 32.0
_SCHARR_Y = _SCHARR_X.T


@dataclass
class CorrGraph:
    """Directional dense correspondences for every ordered view pair.

    target : {(i, k): (H, W, 2) float64}, per-pixel (u, v) in view k
    conf   : {(i, k): (H, W) float64} in [0, 1]
    valid  : {(i, k): (H, W) bool}

    Pairs with no correspondences may simply be absent; self-pairs are
    never stored.
    """

    n_views: int
    H: int
    W: int
    target: dict = field(default_factory=dict)
    conf: dict = field(default_factory=dict)
    valid: dict = field(default_factory=dict)

    def __post_init__(self):
        for (i, k) in self.target:
            if i == k:
                raise DimensionMismatch("self-pairs are not allowed")
            if not (0 <= i < self.n_views and 0 <= k < self.n_views):
                raise DimensionMismatch(f"pair {(i, k)} out of range")
            if self.target[(i, k)].shape != (self.H, self.W, 2):
                raise DimensionMismatch("target grid shape mismatch")
            if self.conf[(i, k)].shape != (self.H, self.W):
                raise DimensionMismatch("confidence grid shape mismatch")
            if self.valid[(i, k)].shape != (self.H, self.W):
                raise DimensionMismatch("validity grid shape mismatch")

    def pairs(self) -> list[tuple[int, int]]:
        return sorted(self.target.keys())

    def copy_with(self, valid: dict | None = None, target: dict | None = None,
                  conf: dict | None = None) -> "CorrGraph":
        return CorrGraph(
            n_views=self.n_views, H=self.H, W=self.W,
            target=dict(self.target if target is None else target),
            conf=dict(self.conf if conf is None else conf),
            valid=dict(self.valid if valid is None else valid))


def _backward_lookup(back_target: np.ndarray, tu: np.ndarray, tv: np.ndarray,
                     interp: str):
    """Sample the reverse grid at forward-target locations.

    Returns (bu, bv, inbounds).  Nearest mode rounds with np.rint
    (half-to-even); bilinear interpolates the four neighbours.
    """
    h, w = back_target.shape[:2]
    if interp == "nearest":
        ru = np.rint(tu).astype(np.int64)
        rv = np.rint(tv).astype(np.int64)
        inb = (ru >= 0) & (ru < w) & (rv >= 0) & (rv < h)
        rs, us = np.clip(rv, 0, h - 1), np.clip(ru, 0, w - 1)
        picked = back_target[rs, us]
        return picked[..., 0], picked[..., 1], inb
    if interp == "bilinear":
        inb = (tu >= 0) & (tu <= w - 1) & (tv >= 0) & (tv <= h - 1)
        u0 = np.clip(np.floor(tu).astype(np.int64), 0, w - 2) if w > 1 else np.zeros_like(tu, np.int64)
        v0 = np.clip(np.floor(tv).astype(np.int64), 0, h - 2) if h > 1 else np.zeros_like(tv, np.int64)
        fu = np.clip(tu - u0, 0.0, 1.0)
        fv = np.clip(tv - v0, 0.0, 1.0)
        u1 = np.minimum(u0 + 1, w - 1)
        v1 = np.minimum(v0 + 1, h - 1)
        out = ((1 - fv)[..., None] * ((1 - fu)[..., None] * back_target[v0, u0]
                                      + fu[..., None] * back_target[v0, u1])
               + fv[..., None] * ((1 - fu)[..., None] * back_target[v1, u0]
                                  + fu[..., None] * back_target[v1, u1]))
        return out[..., 0], out[..., 1], inb
    raise ValueError(f"unknown interpolation mode {interp!r}")


def cycle_errors(graph: CorrGraph, pair: tuple[int, int],
                 interp: str = "nearest") -> np.ndarray:
    """Per-pixel round-trip error for one ordered pair.

    error[v, u] = || back(target[v, u]) - (u, v) ||_2, where back() samples
    the reverse pair's grid.  Out-of-bounds forward targets and missing
    reverse grids give +inf.  The validity masks are not consulted.
    """
    i, k = pair
    err = np.full((graph.H, graph.W), np.inf)
    if pair not in graph.target or (k, i) not in graph.target:
        return err
    t = graph.target[pair]
    bu, bv, inb = _backward_lookup(graph.target[(k, i)], t[..., 0], t[..., 1], interp)
    uu, vv = np.meshgrid(np.arange(graph.W), np.arange(graph.H))
    d = np.hypot(bu - uu, bv - vv)
    err[inb] = d[inb]
    return err


def cycle_filter(graph: CorrGraph, eps: float,
                 interp: str = "nearest") -> CorrGraph:
    """Keep a correspondence valid only when its round trip lands within eps.

    Targets and confidences pass through unchanged, so the operation is
    idempotent: the round-trip error of a pixel does not depend on validity.
    """
    new_valid = {}
    for pair in graph.pairs():
        err = cycle_errors(graph, pair, interp=interp)
        new_valid[pair] = graph.valid[pair] & (err < eps)
    return graph.copy_with(valid=new_valid)


def ensemble(g1: CorrGraph, g2: CorrGraph) -> CorrGraph:
    """Merge two matchers by per-pixel cycle-consistency error.

    For every ordered pair and pixel the entry (target, confidence,
    validity) is taken from whichever input has the smaller round-trip
    error, with invalid entries counting as infinite error and exact ties
    resolved in favour of the first input.
    """
    if (g1.n_views, g1.H, g1.W) != (g2.n_views, g2.H, g2.W):
        raise DimensionMismatch("ensemble inputs must share views and grid size")
    h, w = g1.H, g1.W
    zeros_t = np.zeros((h, w, 2))
    zeros_c = np.zeros((h, w))
    zeros_v = np.zeros((h, w), dtype=bool)

    def entry(g, pair):
        if pair in g.target:
            e = np.where(g.valid[pair], cycle_errors(g, pair), np.inf)
            return g.target[pair], g.conf[pair], g.valid[pair], e
        return zeros_t, zeros_c, zeros_v, np.full((h, w), np.inf)

    target, conf, valid = {}, {}, {}
    for pair in sorted(set(g1.target) | set(g2.target)):
        t1, c1, v1, e1 = entry(g1, pair)
        t2, c2, v2, e2 = entry(g2, pair)
        pick1 = ~(e2 < e1)  # ties and both-infinite go to g1
        target[pair] = np.where(pick1[..., None], t1, t2)
        conf[pair] = np.where(pick1, c1, c2)
        valid[pair] = np.where(pick1, v1, v2)
    return CorrGraph(n_views=g1.n_views, H=h, W=w,
                     target=target, conf=conf, valid=valid)


def confidence_masks(graph: CorrGraph, eps_ba: float,
                     eps_dlt: float) -> tuple[CorrGraph, CorrGraph]:
    """Split into a strict (bundle adjustment) and a permissive (DLT) graph.

    Requires eps_ba > eps_dlt so the strict mask is a subset of the
    permissive one.  Validity becomes valid & (conf > threshold).
    """
    if not eps_ba > eps_dlt:
        raise ThresholdOrderError(
            f"eps_ba ({eps_ba}) must be strictly greater than eps_dlt ({eps_dlt})")
    valid_ba, valid_dlt = {}, {}
    for pair in graph.pairs():
        v, c = graph.valid[pair], graph.conf[pair]
        valid_ba[pair] = v & (c > eps_ba)
        valid_dlt[pair] = v & (c > eps_dlt)
    return graph.copy_with(valid=valid_ba), graph.copy_with(valid=valid_dlt)


# ---------------------------------------------------------------------------
# tracks
# ---------------------------------------------------------------------------

@dataclass
class Track:
    """A multi-view point track anchored at one integer pixel.

    views : (m,) int array of distinct view indices, anchor first
    uv    : (m, 2) float array of per-view pixel observations; the anchor
            row holds the anchor pixel itself.
    """

    anchor_view: int
    anchor_u: int
    anchor_v: int
    views: np.ndarray
    uv: np.ndarray
    saliency: float = 0.0

    def __post_init__(self):
        self.views = np.asarray(self.views, dtype=np.int64)
        self.uv = np.asarray(self.uv, dtype=np.float64).reshape(-1, 2)
        if len(self.views) < 2:
            raise ValueError("a track needs at least two observations")
        if len(self.views) != len(self.uv):
            raise DimensionMismatch("views and uv lengths differ")
        if len(np.unique(self.views)) != len(self.views):
            raise ValueError("at most one observation per view")
        if self.anchor_view not in self.views:
            raise ValueError("anchor view missing from observations")

    def __len__(self) -> int:
        return len(self.views)


def build_tracks(graph: CorrGraph, saliency: np.ndarray | None = None) -> list[Track]:
    """One track per pixel with at least one valid outgoing correspondence.

    The anchor pixel contributes its own coordinates as the first
    observation; every valid outgoing target adds one more.  Tracks with
    fewer than two observations never arise by construction.  Anchors are
    enumerated view by view in row-major pixel order.
    """
    tracks: list[Track] = []
    by_src: dict[int, list[int]] = {}
    for (i, k) in graph.pairs():
        by_src.setdefault(i, []).append(k)
    for i in sorted(by_src):
        ks = sorted(by_src[i])
        vstack = np.stack([graph.valid[(i, k)] for k in ks])  # (m, H, W)
        anchor_rows, anchor_cols = np.nonzero(vstack.any(axis=0))
        if len(anchor_rows) == 0:
            continue
        tstack = np.stack([graph.target[(i, k)] for k in ks])
        vsel = vstack[:, anchor_rows, anchor_cols]            # (m, n_anchor)
        tsel = tstack[:, anchor_rows, anchor_cols]            # (m, n_anchor, 2)
        ks_arr = np.asarray(ks)
        for a in range(len(anchor_rows)):
            av, au = int(anchor_rows[a]), int(anchor_cols[a])
            hit = vsel[:, a]
            views = np.concatenate(([i], ks_arr[hit]))
            uv = np.concatenate(([[au, av]], tsel[hit, a]), axis=0)
            score = float(saliency[i, av, au]) if saliency is not None else 0.0
            tracks.append(Track(anchor_view=i, anchor_u=au, anchor_v=av,
                                views=views, uv=uv, saliency=score))
    return tracks


def select_ba_anchors(tracks: list[Track], saliency: np.ndarray,
                      n_ba: int) -> list[Track]:
    """Keep at most n_ba tracks per anchor view, highest saliency first.

    Ties break deterministically toward the smaller row-major anchor
    position v * W + u.  Selected tracks are returned grouped by view in
    selection order with their saliency field stamped.
    """
    w = saliency.shape[2]
    by_view: dict[int, list[Track]] = {}
    for tr in tracks:
        by_view.setdefault(tr.anchor_view, []).append(tr)
    selected: list[Track] = []
    for view in sorted(by_view):
        group = by_view[view]
        scores = np.array([saliency[view, tr.anchor_v, tr.anchor_u] for tr in group])
        order = sorted(range(len(group)),
                       key=lambda j: (-scores[j],
                                      group[j].anchor_v * w + group[j].anchor_u))
        for j in order[:n_ba]:
            group[j].saliency = float(scores[j])
            selected.append(group[j])
    return selected


# ---------------------------------------------------------------------------
# saliency sources
# ---------------------------------------------------------------------------

def gradient_saliency(images: np.ndarray) -> np.ndarray:
    """Scharr gradient magnitude of (n, H, W) grayscale images."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3:
        raise DimensionMismatch("images must have shape (n, H, W)")
    out = np.empty_like(images)
    for i, img in enumerate(images):
        gx = ndimage.convolve(img, _SCHARR_X, mode="nearest")
        gy = ndimage.convolve(img, _SCHARR_Y, mode="nearest")
        out[i] = np.hypot(gx, gy)
    return out


def uniform_saliency(n_views: int, h: int, w: int) -> np.ndarray:
    """All-equal scores; anchor selection then falls back to row-major order."""
    return np.zeros((n_views, h, w))
