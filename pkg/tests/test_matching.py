"""Correspondence filtering, ensembling, masks, tracks and saliency.

Every [oracle] test re-implements the operation as an explicit per-pixel
Python loop and compares the vectorized implementation against it.  The
reference semantics:

    cycle error at (v, u)  = || back(target_fw[v, u]) - (u, v) ||
    back(p)                = target_bw[rint(p.v), rint(p.u)]   (nearest)
    survives               = error < eps                       (strict)

Validity flags never feed into the error itself; they only gate which
entries a filter keeps, so spoofed reverse values count.
"""

from __future__ import annotations

import numpy as np
import pytest
from scipy import ndimage

from ggsfm import (CorrGraph, ThresholdOrderError, build_tracks,
                   confidence_masks, cycle_errors, cycle_filter, ensemble,
                   gradient_saliency, select_ba_anchors, uniform_saliency)


def _identity_pair(h, w):
    """Forward map sending every pixel to its own coordinates."""
    uu, vv = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    return np.stack([uu, vv], axis=-1)


def _two_view(h, w, fwd, bwd, valid_fw=None, valid_bw=None,
              conf_fw=None, conf_bw=None) -> CorrGraph:
    ones = np.ones((h, w))
    true = np.ones((h, w), dtype=bool)
    return CorrGraph(
        n_views=2, H=h, W=w,
        target={(0, 1): fwd, (1, 0): bwd},
        conf={(0, 1): ones if conf_fw is None else conf_fw,
              (1, 0): ones if conf_bw is None else conf_bw},
        valid={(0, 1): true if valid_fw is None else valid_fw,
               (1, 0): true if valid_bw is None else valid_bw})


def _random_graph(rng, n_views=3, h=8, w=8, spread=10.0) -> CorrGraph:
    target, conf, valid = {}, {}, {}
    for i in range(n_views):
        for k in range(n_views):
            if i == k:
                continue
            target[(i, k)] = rng.uniform(-2, spread, size=(h, w, 2))
            conf[(i, k)] = rng.uniform(size=(h, w))
            valid[(i, k)] = rng.uniform(size=(h, w)) < 0.8
    return CorrGraph(n_views=n_views, H=h, W=w, target=target, conf=conf,
                     valid=valid)


def _cycle_error_reference(graph, pair, v, u):
    """Per-pixel round trip, nearest-neighbour reverse lookup."""
    i, k = pair
    if pair not in graph.target or (k, i) not in graph.target:
        return np.inf
    tu, tv = graph.target[pair][v, u]
    ru, rv = int(np.rint(tu)), int(np.rint(tv))
    if not (0 <= ru < graph.W and 0 <= rv < graph.H):
        return np.inf
    bu, bv = graph.target[(k, i)][rv, ru]
    return float(np.hypot(bu - u, bv - v))


# ── cycle filtering ──────────────────────────────────────────────────────

def test_perfect_mutual_matches_all_survive():
    h, w = 6, 6
    g = _two_view(h, w, _identity_pair(h, w), _identity_pair(h, w))
    out = cycle_filter(g, 4.0)
    assert out.valid[(0, 1)].all()
    assert out.valid[(1, 0)].all()


def test_ten_pixel_round_trip_marked_invalid():
    h, w = 6, 6
    bwd = _identity_pair(h, w)
    bwd[..., 0] += 10.0  # every round trip lands 10 px right of the start
    g = _two_view(h, w, _identity_pair(h, w), bwd)
    out = cycle_filter(g, 4.0)
    assert not out.valid[(0, 1)].any()


def test_cycle_threshold_is_strict():
    h, w = 4, 4
    bwd = _identity_pair(h, w)
    bwd[..., 0] += 2.0
    g = _two_view(h, w, _identity_pair(h, w), bwd)
    assert not cycle_filter(g, 2.0).valid[(0, 1)].any()
    assert cycle_filter(g, 2.0 + 1e-9).valid[(0, 1)].all()


def test_forward_target_out_of_bounds_is_infinite_error():
    h, w = 4, 4
    fwd = _identity_pair(h, w)
    fwd[0, 0] = (-7.0, 0.0)
    g = _two_view(h, w, fwd, _identity_pair(h, w))
    err = cycle_errors(g, (0, 1))
    assert np.isinf(err[0, 0])
    assert np.isfinite(err[1:, :]).all()


def test_missing_reverse_grid_gives_infinite_error():
    h, w = 3, 3
    g = CorrGraph(n_views=2, H=h, W=w,
                  target={(0, 1): _identity_pair(h, w)},
                  conf={(0, 1): np.ones((h, w))},
                  valid={(0, 1): np.ones((h, w), dtype=bool)})
    assert np.isinf(cycle_errors(g, (0, 1))).all()


def test_cycle_errors_ignore_validity_flags(rng):
    # flipping validity anywhere must not change a single error value
    g = _random_graph(rng, n_views=2)
    e1 = cycle_errors(g, (0, 1))
    g2 = g.copy_with(valid={p: np.zeros_like(v) for p, v in g.valid.items()})
    e2 = cycle_errors(g2, (0, 1))
    assert np.array_equal(e1, e2)


def test_cycle_filter_matches_per_pixel_oracle(rng):
    g = _random_graph(rng, n_views=3, h=8, w=8)
    eps = 4.0
    out = cycle_filter(g, eps)
    for pair in g.pairs():
        for v in range(g.H):
            for u in range(g.W):
                want = g.valid[pair][v, u] and \
                    _cycle_error_reference(g, pair, v, u) < eps
                assert out.valid[pair][v, u] == want, (pair, v, u)
        assert np.array_equal(out.target[pair], g.target[pair])
        assert np.array_equal(out.conf[pair], g.conf[pair])


def test_cycle_filter_is_idempotent(rng):
    g = _random_graph(rng, n_views=2)
    once = cycle_filter(g, 4.0)
    twice = cycle_filter(once, 4.0)
    for pair in g.pairs():
        assert np.array_equal(once.valid[pair], twice.valid[pair])


def test_half_integer_targets_round_to_even():
    # rint(0.5) = 0 and rint(1.5) = 2: the reverse pixel differs, so the
    # survivor set depends on banker's rounding semantics
    h, w = 4, 4
    fwd = _identity_pair(h, w)
    fwd[0, 0] = (0.5, 0.0)
    fwd[0, 1] = (1.5, 0.0)
    bwd = _identity_pair(h, w)
    bwd[0, 0] = (0.0, 0.0)   # perfect for pixel (0, 0)
    bwd[0, 2] = (1.0, 0.0)   # perfect for pixel (1, 0)
    g = _two_view(h, w, fwd, bwd)
    err = cycle_errors(g, (0, 1))
    assert err[0, 0] == 0.0
    assert err[0, 1] == 0.0


def test_bilinear_reverse_lookup_interpolates():
    h, w = 3, 4
    fwd = _identity_pair(h, w)
    fwd[0, 0] = (0.5, 0.0)
    bwd = _identity_pair(h, w)
    bwd[0, 0] = (0.0, 0.0)
    bwd[0, 1] = (2.0, 0.0)  # midpoint lookup blends to (1.0, 0.0)
    g = _two_view(h, w, fwd, bwd)
    err = cycle_errors(g, (0, 1), interp="bilinear")
    assert np.isclose(err[0, 0], 1.0)


# ── two-matcher ensembling ───────────────────────────────────────────────

def test_ensemble_dominated_matcher_never_chosen(rng):
    h, w = 5, 5
    g1 = _two_view(h, w, _identity_pair(h, w), _identity_pair(h, w))
    off = _identity_pair(h, w)
    off[..., 1] += 3.0
    g2 = _two_view(h, w, off, _identity_pair(h, w),
                   conf_fw=np.full((h, w), 0.2))
    out = ensemble(g1, g2)
    assert np.array_equal(out.target[(0, 1)], g1.target[(0, 1)])
    assert np.array_equal(out.conf[(0, 1)], g1.conf[(0, 1)])


def test_ensemble_takes_other_side_when_first_is_invalid():
    h, w = 4, 4
    v1 = np.zeros((h, w), dtype=bool)  # g1 invalid everywhere: infinite error
    g1 = _two_view(h, w, _identity_pair(h, w), _identity_pair(h, w),
                   valid_fw=v1)
    g2 = _two_view(h, w, _identity_pair(h, w) + 0.25,
                   _identity_pair(h, w), conf_fw=np.full((h, w), 0.9))
    out = ensemble(g1, g2)
    assert out.valid[(0, 1)].all()
    assert np.array_equal(out.target[(0, 1)], g2.target[(0, 1)])


def test_ensemble_ties_prefer_first_input(rng):
    h, w = 4, 4
    g1 = _two_view(h, w, _identity_pair(h, w), _identity_pair(h, w),
                   conf_fw=np.full((h, w), 0.3))
    g2 = _two_view(h, w, _identity_pair(h, w), _identity_pair(h, w),
                   conf_fw=np.full((h, w), 0.8))
    out = ensemble(g1, g2)
    assert np.allclose(out.conf[(0, 1)], 0.3)


def test_ensemble_matches_per_pixel_oracle(rng):
    g1 = _random_graph(rng, n_views=2, h=8, w=8)
    g2 = _random_graph(rng, n_views=2, h=8, w=8)
    out = ensemble(g1, g2)
    for pair in [(0, 1), (1, 0)]:
        for v in range(8):
            for u in range(8):
                e1 = _cycle_error_reference(g1, pair, v, u) \
                    if g1.valid[pair][v, u] else np.inf
                e2 = _cycle_error_reference(g2, pair, v, u) \
                    if g2.valid[pair][v, u] else np.inf
                src = g2 if e2 < e1 else g1
                assert np.array_equal(out.target[pair][v, u],
                                      src.target[pair][v, u]), (pair, v, u)
                assert out.conf[pair][v, u] == src.conf[pair][v, u]
                assert out.valid[pair][v, u] == src.valid[pair][v, u]


def test_ensemble_rejects_mismatched_grids(rng):
    g1 = _random_graph(rng, n_views=2, h=4, w=4)
    g2 = _random_graph(rng, n_views=2, h=5, w=4)
    with pytest.raises(Exception):
        ensemble(g1, g2)


# ── confidence masks ─────────────────────────────────────────────────────

def test_masks_conf_above_both_thresholds_passes_both():
    h, w = 4, 4
    g = _two_view(h, w, _identity_pair(h, w), _identity_pair(h, w),
                  conf_fw=np.full((h, w), 0.7), conf_bw=np.full((h, w), 0.7))
    g_ba, g_dlt = confidence_masks(g, 0.6, 0.1)
    assert np.array_equal(g_ba.valid[(0, 1)], g.valid[(0, 1)])
    assert np.array_equal(g_dlt.valid[(0, 1)], g.valid[(0, 1)])


def test_masks_conf_between_thresholds_passes_permissive_only():
    h, w = 4, 4
    g = _two_view(h, w, _identity_pair(h, w), _identity_pair(h, w),
                  conf_fw=np.full((h, w), 0.3), conf_bw=np.full((h, w), 0.3))
    g_ba, g_dlt = confidence_masks(g, 0.6, 0.1)
    assert not g_ba.valid[(0, 1)].any()
    assert g_dlt.valid[(0, 1)].all()


def test_masks_thresholds_are_strict():
    h, w = 2, 2
    g = _two_view(h, w, _identity_pair(h, w), _identity_pair(h, w),
                  conf_fw=np.full((h, w), 0.6), conf_bw=np.full((h, w), 0.1))
    g_ba, g_dlt = confidence_masks(g, 0.6, 0.1)
    assert not g_ba.valid[(0, 1)].any()   # 0.6 > 0.6 is false
    assert not g_dlt.valid[(1, 0)].any()  # 0.1 > 0.1 is false


def test_masks_match_per_pixel_oracle(rng):
    g = _random_graph(rng, n_views=3)
    g_ba, g_dlt = confidence_masks(g, 0.6, 0.1)
    for pair in g.pairs():
        for v in range(g.H):
            for u in range(g.W):
                base = g.valid[pair][v, u]
                c = g.conf[pair][v, u]
                assert g_ba.valid[pair][v, u] == (base and c > 0.6)
                assert g_dlt.valid[pair][v, u] == (base and c > 0.1)
    # the strict mask is always a subset of the permissive one
    for pair in g.pairs():
        assert not (g_ba.valid[pair] & ~g_dlt.valid[pair]).any()


def test_masks_reject_inverted_thresholds(rng):
    g = _random_graph(rng, n_views=2)
    with pytest.raises(ThresholdOrderError):
        confidence_masks(g, 0.1, 0.6)
    with pytest.raises(ThresholdOrderError):
        confidence_masks(g, 0.5, 0.5)


# ── track construction ───────────────────────────────────────────────────

def test_single_valid_pair_gives_one_two_view_track():
    h, w = 3, 3
    valid = np.zeros((h, w), dtype=bool)
    valid[1, 2] = True
    g = _two_view(h, w, _identity_pair(h, w), _identity_pair(h, w),
                  valid_fw=valid, valid_bw=np.zeros((h, w), dtype=bool))
    tracks = build_tracks(g)
    assert len(tracks) == 1
    tr = tracks[0]
    assert tr.anchor_view == 0 and (tr.anchor_u, tr.anchor_v) == (2, 1)
    assert len(tr) == 2
    assert list(tr.views) == [0, 1]
    assert np.allclose(tr.uv[0], [2.0, 1.0])


def test_pixel_valid_toward_two_views_gives_three_observations():
    h, w = 3, 3
    valid01 = np.zeros((h, w), dtype=bool)
    valid02 = np.zeros((h, w), dtype=bool)
    valid01[0, 1] = True
    valid02[0, 1] = True
    ident = _identity_pair(h, w)
    false = np.zeros((h, w), dtype=bool)
    ones = np.ones((h, w))
    g = CorrGraph(
        n_views=3, H=h, W=w,
        target={(0, 1): ident, (0, 2): ident + 1.5, (1, 0): ident,
                (2, 0): ident, (1, 2): ident, (2, 1): ident},
        conf={p: ones for p in
              [(0, 1), (0, 2), (1, 0), (2, 0), (1, 2), (2, 1)]},
        valid={(0, 1): valid01, (0, 2): valid02, (1, 0): false,
               (2, 0): false, (1, 2): false, (2, 1): false})
    tracks = build_tracks(g)
    assert len(tracks) == 1
    tr = tracks[0]
    assert len(tr) == 3
    assert list(tr.views) == [0, 1, 2]
    assert np.allclose(tr.uv[2], [1.0 + 1.5, 0.0 + 1.5])


def test_tracks_match_exhaustive_anchor_enumeration(rng):
    g = _random_graph(rng, n_views=3, h=6, w=6)
    tracks = build_tracks(g)
    got = {}
    for tr in tracks:
        key = (tr.anchor_view, tr.anchor_v, tr.anchor_u)
        assert key not in got, "one track per anchor pixel"
        got[key] = tr

    for i in range(g.n_views):
        for v in range(g.H):
            for u in range(g.W):
                views, uv = [i], [(float(u), float(v))]
                for k in range(g.n_views):
                    if k == i or (i, k) not in g.valid:
                        continue
                    if g.valid[(i, k)][v, u]:
                        views.append(k)
                        uv.append(tuple(g.target[(i, k)][v, u]))
                key = (i, v, u)
                if len(views) < 2:
                    assert key not in got
                    continue
                tr = got.pop(key)
                assert list(tr.views) == views
                assert np.allclose(tr.uv, uv)
    assert not got, "no extra tracks"


# ── anchor budgeting ─────────────────────────────────────────────────────

def _tracks_on_grid(valid_pixels, h=4, w=4):
    valid = np.zeros((h, w), dtype=bool)
    for (v, u) in valid_pixels:
        valid[v, u] = True
    g = _two_view(h, w, _identity_pair(h, w), _identity_pair(h, w),
                  valid_fw=valid, valid_bw=np.zeros((h, w), dtype=bool))
    return build_tracks(g), h, w


def test_select_top_two_by_saliency():
    tracks, h, w = _tracks_on_grid([(0, 0), (1, 1), (2, 2)])
    sal = np.zeros((2, h, w))
    sal[0, 0, 0] = 0.1
    sal[0, 1, 1] = 0.9
    sal[0, 2, 2] = 0.5
    out = select_ba_anchors(tracks, sal, 2)
    anchors = [(tr.anchor_v, tr.anchor_u) for tr in out]
    assert anchors == [(1, 1), (2, 2)]
    assert [tr.saliency for tr in out] == [0.9, 0.5]


def test_select_keeps_everything_when_budget_is_large():
    tracks, h, w = _tracks_on_grid([(0, 0), (1, 1), (2, 2)])
    out = select_ba_anchors(tracks, np.zeros((2, h, w)), 99)
    assert len(out) == 3


def test_select_ties_break_row_major():
    tracks, h, w = _tracks_on_grid([(0, 3), (1, 0), (0, 1)])
    out = select_ba_anchors(tracks, np.zeros((2, h, w)), 2)
    anchors = [(tr.anchor_v, tr.anchor_u) for tr in out]
    # equal scores: keep the smallest v * W + u positions
    assert anchors == [(0, 1), (0, 3)]


def test_select_matches_sort_and_truncate_oracle(rng):
    g = _random_graph(rng, n_views=3, h=6, w=6)
    tracks = build_tracks(g)
    sal = rng.uniform(size=(3, 6, 6))
    n_ba = 7
    out = select_ba_anchors(tracks, sal, n_ba)

    expect = []
    for view in range(3):
        group = [tr for tr in tracks if tr.anchor_view == view]
        group.sort(key=lambda tr: (-sal[view, tr.anchor_v, tr.anchor_u],
                                   tr.anchor_v * 6 + tr.anchor_u))
        expect.extend(group[:n_ba])
    assert [(t.anchor_view, t.anchor_v, t.anchor_u) for t in out] \
        == [(t.anchor_view, t.anchor_v, t.anchor_u) for t in expect]


# ── saliency sources ─────────────────────────────────────────────────────

def test_uniform_saliency_is_all_zero():
    s = uniform_saliency(2, 3, 4)
    assert s.shape == (2, 3, 4)
    assert not s.any()


def test_gradient_saliency_flat_image_is_zero():
    assert not gradient_saliency(np.full((1, 8, 8), 3.7)).any()


def test_gradient_saliency_matches_scharr_oracle(rng):
    img = rng.uniform(size=(2, 9, 11))
    kx = np.array([[-3, 0, 3], [-10, 0, 10], [-3, 0, 3]]) / 32.0
    out = gradient_saliency(img)
    for i in range(2):
        gx = ndimage.convolve(img[i], kx, mode="nearest")
        gy = ndimage.convolve(img[i], kx.T, mode="nearest")
        assert np.allclose(out[i], np.hypot(gx, gy))
