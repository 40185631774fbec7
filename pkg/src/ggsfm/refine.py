"""Patch-based refinement of dense point maps against a guided cloud.

The scene is cut into overlapping cubes centered on guide points. Inside
each cube, coordinates are normalized to the unit cube, every point is
encoded as a fixed 67-dim vector, a pluggable refiner predicts per-point
displacements plus a raw confidence, and overlapping patch predictions
are averaged back into the dense map. Dense pixels covered by no patch
keep their input values.

A refiner is any callable (patch, embeddings) -> RefinerOutput. It must
be pure: the same patch must produce the same output. The built-in
baseline snaps guided dense points onto their guide and interpolates
displacements elsewhere; learned refiners can attach out of process via
the PTCH/ROUT frame protocol (see ExternalRefiner).
"""

from __future__ import annotations

import shlex
import subprocess
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import io as ggio
from .errors import BudgetUnsatisfiable, EmptyCloud, FormatError
from .scene import PointMapSet

EMBED_DIM = 67
_N_FREQ = 4          # sinusoidal frequencies 2^0 .. 2^3
_TYPE_DIM = 16
_IDW_K = 8           # neighbors for displacement interpolation
_IDW_POWER = 2
_CONF_DECAY = 0.05   # confidence length scale as a fraction of half_width
_C_RAW_FLOOR = -30.0
_SHRINK = 0.9
_MIN_HALF_RATIO = 1e-6


def scene_radius(cloud) -> float:
    """Scene radius: 3x the RMS distance of the points from their centroid.

    Accepts a GuidedCloud or a bare (n, 3) array.
    """
    pts = np.asarray(getattr(cloud, "points", cloud), dtype=np.float64)
    pts = pts.reshape(-1, 3)
    if len(pts) < 2:
        raise EmptyCloud("scene radius needs at least two points")
    d = pts - pts.mean(axis=0)
    return 3.0 * float(np.sqrt(np.einsum("ij,ij->", d, d) / len(pts)))


@dataclass
class Patch:
    """One normalized cube of the scene.

    dense_idx indexes the flattened dense map ((view*H + v)*W + u);
    guide_idx indexes GuidedCloud.points. link[i] is the position inside
    guide_idx of the guide associated with dense point i, or -1.
    Normalized coordinates are (x - center + half_width) / (2*half_width).
    """

    center: np.ndarray
    half_width: float
    dense_idx: np.ndarray
    guide_idx: np.ndarray
    dense_norm: np.ndarray
    guide_norm: np.ndarray
    link: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.half_width = float(self.half_width)
        self.dense_idx = np.asarray(self.dense_idx, dtype=np.int64).reshape(-1)
        self.guide_idx = np.asarray(self.guide_idx, dtype=np.int64).reshape(-1)
        self.dense_norm = np.asarray(self.dense_norm,
                                     dtype=np.float64).reshape(-1, 3)
        self.guide_norm = np.asarray(self.guide_norm,
                                     dtype=np.float64).reshape(-1, 3)
        self.link = np.asarray(self.link, dtype=np.int64).reshape(-1)
        if self.half_width <= 0:
            raise ValueError("half_width must be positive")
        if len(self.dense_norm) != len(self.dense_idx) \
                or len(self.link) != len(self.dense_idx) \
                or len(self.guide_norm) != len(self.guide_idx):
            raise ValueError("patch field lengths disagree")
        for arr in (self.dense_norm, self.guide_norm):
            if arr.size and (arr.min() < -1e-9 or arr.max() > 1 + 1e-9):
                raise ValueError("normalized coordinates leave [0,1]")
        if np.any(self.link >= len(self.guide_idx)):
            raise ValueError("link points outside the patch guide set")

    @property
    def n_guide(self) -> int:
        return len(self.guide_idx)

    @property
    def n_dense(self) -> int:
        return len(self.dense_idx)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return (x - self.center + self.half_width) / (2.0 * self.half_width)

    def denormalize(self, x_norm: np.ndarray) -> np.ndarray:
        x_norm = np.asarray(x_norm, dtype=np.float64)
        return x_norm * (2.0 * self.half_width) + self.center \
            - self.half_width


@dataclass
class RefinerOutput:
    """Per-point displacement (normalized units) and raw confidence."""

    delta: np.ndarray
    c_raw: np.ndarray

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.float64).reshape(-1, 3)
        self.c_raw = np.asarray(self.c_raw, dtype=np.float64).reshape(-1)
        if len(self.delta) != len(self.c_raw):
            raise ValueError("delta and c_raw lengths differ")
        if not (np.all(np.isfinite(self.delta))
                and np.all(np.isfinite(self.c_raw))):
            raise ValueError("refiner output must be finite")


def _cut_patch(anchor: np.ndarray, start_half: float, min_half: float,
               dense_pos: np.ndarray, dense_flat_idx: np.ndarray,
               guide_pts: np.ndarray, link_pid: np.ndarray,
               budget: int) -> Patch:
    """Cube around one anchor, shrunk x0.9 until the budget holds.

    A guided dense point joins the patch only when its guide point is
    inside the cube too; otherwise it is left to the patches that do
    contain its guide, so every patch covering it snaps it onto the
    same target instead of interpolating around a missing link.
    """
    h = start_half
    while True:
        inside = np.abs(dense_pos - anchor).max(axis=1) <= h
        if int(inside.sum()) <= budget:
            break
        h *= _SHRINK
        if h < min_half:
            raise BudgetUnsatisfiable(
                f"{int(inside.sum())} dense points exceed budget {budget} "
                f"at minimal half-width {min_half:g}")
    g_inside = np.nonzero(np.abs(guide_pts - anchor).max(axis=1) <= h)[0]
    d_sel = np.nonzero(inside)[0]

    # global guide id -> local slot, for the d->s links
    local = np.full(len(guide_pts), -1, dtype=np.int64)
    local[g_inside] = np.arange(len(g_inside))
    pid = link_pid[d_sel]
    keep = (pid < 0) | (local[pid] >= 0)
    d_sel, pid = d_sel[keep], pid[keep]
    link = np.where(pid >= 0, local[pid], -1)

    c = anchor.astype(np.float64)
    scale = 2.0 * h
    return Patch(center=c, half_width=h,
                 dense_idx=dense_flat_idx[d_sel], guide_idx=g_inside,
                 dense_norm=(dense_pos[d_sel] - c + h) / scale,
                 guide_norm=(guide_pts[g_inside] - c + h) / scale,
                 link=link)


def extract_patches(dense: PointMapSet, guide, r_ratio: float = 0.2,
                    budget: int = 400_000, mode: str = "infer",
                    seed: int = 0) -> list:
    """Cover the guided cloud with overlapping cubes.

    infer mode walks the guide points deterministically: the lowest-index
    guide not yet covered anchors the next cube, until every guide is
    covered. A guide counts as covered once one patch holds it together
    with every dense pixel linked to it (anchoring always covers, so the
    walk terminates even when a linked pixel strayed out of reach).
    train mode cuts a single cube around one seeded random anchor. Cubes
    start at half-width r_ratio * scene_radius and shrink by x0.9 while
    they hold more dense points than the budget.
    """
    if not (0.0 < r_ratio <= 1.0):
        raise ValueError("r_ratio must lie in (0, 1]")
    if budget < 1:
        raise ValueError("budget must be at least 1")
    if mode not in ("infer", "train"):
        raise ValueError(f"unknown mode {mode!r}")

    guide_pts = np.asarray(guide.points, dtype=np.float64).reshape(-1, 3)
    radius = scene_radius(guide_pts)
    start_half = r_ratio * radius
    min_half = _MIN_HALF_RATIO * radius

    n, h_img, w_img = dense.shape
    flat_valid = dense.valid.reshape(-1)
    dense_flat_idx = np.nonzero(flat_valid)[0]
    dense_pos = dense.points.reshape(-1, 3)[dense_flat_idx]
    lookup = getattr(guide, "lookup", None)
    if lookup is not None:
        link_pid = lookup.reshape(-1)[dense_flat_idx]
    else:
        link_pid = np.full(len(dense_flat_idx), -1, dtype=np.int64)

    if mode == "train":
        rng = np.random.Generator(np.random.Philox(seed))
        a = int(rng.integers(len(guide_pts)))
        return [_cut_patch(guide_pts[a], start_half, min_half, dense_pos,
                           dense_flat_idx, guide_pts, link_pid, budget)]

    n_link = np.bincount(link_pid[link_pid >= 0], minlength=len(guide_pts))

    patches = []
    covered = np.zeros(len(guide_pts), dtype=bool)
    while not covered.all():
        a = int(np.nonzero(~covered)[0][0])
        p = _cut_patch(guide_pts[a], start_half, min_half, dense_pos,
                       dense_flat_idx, guide_pts, link_pid, budget)
        pid = link_pid[np.searchsorted(dense_flat_idx, p.dense_idx)]
        got = np.bincount(pid[pid >= 0], minlength=len(guide_pts))
        covered[p.guide_idx] |= (got == n_link)[p.guide_idx]
        covered[a] = True
        patches.append(p)
    return patches


def embed(patch: Patch) -> np.ndarray:
    """Fixed 67-dim encodings, guide rows first then dense rows.

    Layout: PE(x) (24) | type token (16) | PE(x_guide) (24) | delta (3),
    where PE runs coordinate-major with [sin(2^k pi x), cos(2^k pi x)]
    for k = 0..3, the guide token sets the first 8 type dims to one and
    the dense token the last 8, x_guide is the linked guide position and
    delta = x_guide - x in normalized coordinates. Guide rows and
    unlinked dense rows zero-pad the last 27 dims.
    """
    ng, nd = patch.n_guide, patch.n_dense
    out = np.zeros((ng + nd, EMBED_DIM))
    out[:ng, 0:24] = _positional_encoding(patch.guide_norm)
    out[:ng, 24:32] = 1.0
    out[ng:, 0:24] = _positional_encoding(patch.dense_norm)
    out[ng:, 32:40] = 1.0
    linked = patch.link >= 0
    if np.any(linked):
        tgt = patch.guide_norm[patch.link[linked]]
        rows = ng + np.nonzero(linked)[0]
        out[rows, 40:64] = _positional_encoding(tgt)
        out[rows, 64:67] = tgt - patch.dense_norm[linked]
    return out


def _positional_encoding(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    freqs = (2.0 ** np.arange(_N_FREQ)) * np.pi
    ang = x[:, :, None] * freqs          # (n, 3, 4)
    pe = np.stack([np.sin(ang), np.cos(ang)], axis=-1)  # (n, 3, 4, 2)
    return pe.reshape(len(x), 24)


def confidence(c_raw):
    """Map raw refiner confidence to the final value exp(c_raw) + 1."""
    return np.exp(c_raw) + 1.0


def baseline_refiner(patch: Patch, embeddings: np.ndarray) -> RefinerOutput:
    """Snap-and-interpolate stand-in for a learned refiner.

    Guided dense points move onto their guide; unguided dense points get
    the inverse-distance-squared average of the 8 nearest guided
    displacements, or zero when the patch has no guided point. Guide
    points never move. Raw confidence decays with the distance to the
    nearest guide point over a 0.05 * half_width length scale.
    """
    ng, nd = patch.n_guide, patch.n_dense
    delta = np.zeros((ng + nd, 3))
    linked = patch.link >= 0
    disp = np.zeros((nd, 3))
    disp[linked] = patch.guide_norm[patch.link[linked]] \
        - patch.dense_norm[linked]
    if np.any(linked) and not np.all(linked):
        src = patch.dense_norm[linked]
        src_disp = disp[linked]
        k = min(_IDW_K, len(src))
        dist, idx = cKDTree(src).query(patch.dense_norm[~linked], k=k)
        dist = np.atleast_2d(dist.reshape(len(dist), -1))
        idx = np.atleast_2d(idx.reshape(len(idx), -1))
        w = 1.0 / np.maximum(dist, 1e-12) ** _IDW_POWER
        exact = dist[:, 0] < 1e-12  # coincident with a guided point
        interp = np.einsum("nk,nkj->nj", w, src_disp[idx]) \
            / w.sum(axis=1, keepdims=True)
        interp[exact] = src_disp[idx[exact, 0]]
        disp[~linked] = interp
    delta[ng:] = disp

    if ng:
        d_guide, _ = cKDTree(patch.guide_norm).query(patch.dense_norm, k=1)
        c_raw = np.concatenate([np.zeros(ng),
                                -np.asarray(d_guide).reshape(-1)
                                / _CONF_DECAY])
        c_raw = np.maximum(c_raw, _C_RAW_FLOOR)
    else:
        c_raw = np.full(ng + nd, _C_RAW_FLOOR)
    return RefinerOutput(delta=delta, c_raw=c_raw)


def fuse(patches: list, outputs: list, dense: PointMapSet) -> PointMapSet:
    """Average overlapping patch predictions back into the dense map.

    Per covered dense pixel the refined position is the mean over
    covering patches of the denormalized prediction x + delta, and the
    refined confidence the mean of the per-patch confidences. The world
    correction is accumulated as 2 * half_width * delta so an identity
    refiner reproduces the input bit-exactly. Uncovered pixels keep
    their input position and confidence.
    """
    if len(patches) != len(outputs):
        raise ValueError("one refiner output per patch required")
    n, h, w = dense.shape
    size = n * h * w
    corr = np.zeros((size, 3))
    conf = np.zeros(size)
    cnt = np.zeros(size, dtype=np.int64)
    for p, out in zip(patches, outputs):
        if len(out.delta) != p.n_guide + p.n_dense:
            raise ValueError("refiner output length mismatches patch")
        d = out.delta[p.n_guide:]
        np.add.at(corr, p.dense_idx, 2.0 * p.half_width * d)
        np.add.at(conf, p.dense_idx, confidence(out.c_raw[p.n_guide:]))
        np.add.at(cnt, p.dense_idx, 1)
    fused = dense.copy()
    hit = cnt > 0
    pos = fused.points.reshape(size, 3)
    pos[hit] += corr[hit] / cnt[hit, None]
    cf = fused.confidence.reshape(size)
    cf[hit] = conf[hit] / cnt[hit]
    return fused


def loss_conf(pred_pos, pred_conf, gt_pos, alpha: float = 0.2) -> float:
    """Confidence-weighted error sum c*|x - gt| minus alpha*log c."""
    pred_pos = np.asarray(pred_pos, dtype=np.float64).reshape(-1, 3)
    gt_pos = np.asarray(gt_pos, dtype=np.float64).reshape(-1, 3)
    c = np.asarray(pred_conf, dtype=np.float64).reshape(-1)
    err = np.linalg.norm(pred_pos - gt_pos, axis=1)
    return float(np.sum(c * err) - alpha * np.sum(np.log(c)))


def loss_conf_grad(pred_pos, pred_conf, gt_pos,
                   alpha: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradients of loss_conf w.r.t. positions and confidences.

    Undefined at zero residual (the norm kink); callers stay away from it.
    """
    pred_pos = np.asarray(pred_pos, dtype=np.float64).reshape(-1, 3)
    gt_pos = np.asarray(gt_pos, dtype=np.float64).reshape(-1, 3)
    c = np.asarray(pred_conf, dtype=np.float64).reshape(-1)
    diff = pred_pos - gt_pos
    err = np.linalg.norm(diff, axis=1)
    g_pos = c[:, None] * diff / np.maximum(err, 1e-300)[:, None]
    g_conf = err - alpha / c
    return g_pos, g_conf


def loss_id(pred_pos, guide_pos, link) -> float:
    """Anchoring term: summed distance of linked predictions to guides."""
    pred_pos = np.asarray(pred_pos, dtype=np.float64).reshape(-1, 3)
    guide_pos = np.asarray(guide_pos, dtype=np.float64).reshape(-1, 3)
    link = np.asarray(link, dtype=np.int64).reshape(-1)
    sel = link >= 0
    if not np.any(sel):
        return 0.0
    d = pred_pos[sel] - guide_pos[link[sel]]
    return float(np.sum(np.linalg.norm(d, axis=1)))


def total_loss(pred_pos, pred_conf, gt_pos, guide_pos, link,
               alpha: float = 0.2, lambda_id: float = 1.0) -> float:
    return loss_conf(pred_pos, pred_conf, gt_pos, alpha) \
        + lambda_id * loss_id(pred_pos, guide_pos, link)


class ExternalRefiner:
    """Refiner running as a subprocess speaking PTCH/ROUT frames.

    The command receives one PTCH frame on stdin and must answer with
    one ROUT frame on stdout, one invocation per patch. Predicted
    displacements are interpreted in normalized patch coordinates.
    """

    def __init__(self, command: str):
        self.argv = shlex.split(command)

    def __call__(self, patch: Patch, embeddings: np.ndarray) -> RefinerOutput:
        frame = ggio.encode_patch_frame(
            patch.center, patch.half_width, patch.guide_norm,
            patch.dense_norm, patch.link, embeddings)
        proc = subprocess.run(self.argv, input=frame,
                              stdout=subprocess.PIPE, check=False)
        if proc.returncode != 0:
            raise FormatError(
                f"external refiner exited with {proc.returncode}")
        import io as _io
        delta, c_raw = ggio.decode_refiner_frame(_io.BytesIO(proc.stdout))
        n = patch.n_guide + patch.n_dense
        if len(delta) != n:
            raise FormatError(
                f"external refiner returned {len(delta)} rows for {n} points")
        return RefinerOutput(delta=np.asarray(delta, dtype=np.float64),
                             c_raw=np.asarray(c_raw, dtype=np.float64))


def refine_pointmaps(dense: PointMapSet, guide, r_ratio: float = 0.2,
                     budget: int = 400_000, refiner=None, threads: int = 1,
                     ) -> tuple[PointMapSet, list, list]:
    """Extract patches, run the refiner on each, fuse. Returns
    (refined maps, patches, outputs)."""
    if refiner is None:
        refiner = baseline_refiner
    patches = extract_patches(dense, guide, r_ratio=r_ratio, budget=budget,
                              mode="infer")
    from ._parallel import map_ordered
    outputs = map_ordered(lambda p: refiner(p, embed(p)), patches,
                          threads=threads)
    return fuse(patches, outputs, dense), patches, outputs
