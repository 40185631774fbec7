"""On-disk formats.

Text formats are whitespace-separated with ``#`` comment lines.  Binary
formats are little-endian, tagged with a 4-byte ASCII magic:

* ``PMAP``  dense point-map sets
* ``CORR``  pairwise correspondence graphs
* ``SALI``  per-pixel saliency grids
* ``PTCH`` / ``ROUT``  patch and refiner-output frames for subprocess piping

Floats are written with 17 significant digits so text round-trips are exact
at double precision; binary payloads are float32.
"""

from __future__ import annotations

import struct
from typing import IO, Iterable

import numpy as np

from .errors import FormatError
from .scene import CameraParams, PointMapSet

_FMT = "%.17g"


def _read_exact(fh: IO[bytes], n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(buf)}")
    return buf


def _expect_magic(fh: IO[bytes], magic: bytes):
    got = fh.read(4)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")


def _read_u32(fh: IO[bytes], count: int) -> tuple:
    return struct.unpack(f"<{count}I", _read_exact(fh, 4 * count))


def _read_f32(fh: IO[bytes], count: int) -> np.ndarray:
    return np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4").astype(np.float64)


def _read_u8(fh: IO[bytes], count: int) -> np.ndarray:
    return np.frombuffer(_read_exact(fh, count), dtype=np.uint8)


# ---------------------------------------------------------------------------
# cameras: text, one line per camera
# ---------------------------------------------------------------------------

def save_cameras(path, cameras: Iterable[CameraParams]):
    """Write ``id qw qx qy qz tx ty tz fx fy cx cy`` lines."""
    with open(path, "w") as fh:
        fh.write("# id qw qx qy qz tx ty tz fx fy cx cy\n")
        for i, cam in enumerate(cameras):
            vals = np.concatenate([cam.q, cam.t, cam.f])
            fh.write(str(i) + " " + " ".join(_FMT % v for v in vals) + "\n")


def load_cameras(path) -> list[CameraParams]:
    """Read cameras; ids must be a permutation of 0..n-1."""
    entries = {}
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 12:
                raise FormatError(f"camera line needs 12 fields, got {len(parts)}")
            cid = int(parts[0])
            vals = np.array([float(p) for p in parts[1:]])
            if cid in entries:
                raise FormatError(f"duplicate camera id {cid}")
            entries[cid] = CameraParams(q=vals[0:4], t=vals[4:7], f=vals[7:11])
    if sorted(entries) != list(range(len(entries))):
        raise FormatError("camera ids must be dense 0..n-1")
    return [entries[i] for i in range(len(entries))]


# ---------------------------------------------------------------------------
# PMAP: dense point-map sets
# ---------------------------------------------------------------------------

def save_pointmaps(path, pm: PointMapSet):
    n, h, w = pm.shape
    with open(path, "wb") as fh:
        fh.write(b"PMAP")
        fh.write(struct.pack("<3I", n, h, w))
        fh.write(np.ascontiguousarray(pm.points, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(pm.confidence, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(pm.valid, dtype=np.uint8).tobytes())


def load_pointmaps(path) -> PointMapSet:
    with open(path, "rb") as fh:
        _expect_magic(fh, b"PMAP")
        n, h, w = _read_u32(fh, 3)
        pts = _read_f32(fh, n * h * w * 3).reshape(n, h, w, 3)
        conf = _read_f32(fh, n * h * w).reshape(n, h, w)
        valid = _read_u8(fh, n * h * w).reshape(n, h, w).astype(bool)
    # invalid slots may carry junk in the file; zero them for the invariant
    pts = np.where(valid[..., None], pts, 0.0)
    return PointMapSet(points=pts, confidence=conf, valid=valid)


# ---------------------------------------------------------------------------
# CORR: pairwise correspondence graphs
# ---------------------------------------------------------------------------

def save_corr(path, graph):
    """Write every ordered pair (i, k), i != k, in lexicographic order."""
    n, h, w = graph.n_views, graph.H, graph.W
    zeros_t = np.zeros((h, w, 2), dtype="<f4")
    zeros_c = np.zeros((h, w), dtype="<f4")
    zeros_v = np.zeros((h, w), dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"CORR")
        fh.write(struct.pack("<3I", n, h, w))
        for i in range(n):
            for k in range(n):
                if i == k:
                    continue
                if (i, k) in graph.target:
                    fh.write(np.ascontiguousarray(
                        graph.target[(i, k)], dtype="<f4").tobytes())
                    fh.write(np.ascontiguousarray(
                        graph.conf[(i, k)], dtype="<f4").tobytes())
                    fh.write(np.ascontiguousarray(
                        graph.valid[(i, k)], dtype=np.uint8).tobytes())
                else:
                    fh.write(zeros_t.tobytes())
                    fh.write(zeros_c.tobytes())
                    fh.write(zeros_v.tobytes())


def load_corr(path):
    from .matching import CorrGraph

    with open(path, "rb") as fh:
        _expect_magic(fh, b"CORR")
        n, h, w = _read_u32(fh, 3)
        target, conf, valid = {}, {}, {}
        for i in range(n):
            for k in range(n):
                if i == k:
                    continue
                target[(i, k)] = _read_f32(fh, h * w * 2).reshape(h, w, 2)
                conf[(i, k)] = _read_f32(fh, h * w).reshape(h, w)
                valid[(i, k)] = _read_u8(fh, h * w).reshape(h, w).astype(bool)
    return CorrGraph(n_views=n, H=h, W=w, target=target, conf=conf, valid=valid)


# ---------------------------------------------------------------------------
# SALI: saliency grids
# ---------------------------------------------------------------------------

def save_saliency(path, grids: np.ndarray):
    grids = np.asarray(grids)
    if grids.ndim != 3:
        raise FormatError("saliency grids must have shape (n, H, W)")
    n, h, w = grids.shape
    with open(path, "wb") as fh:
        fh.write(b"SALI")
        fh.write(struct.pack("<3I", n, h, w))
        fh.write(np.ascontiguousarray(grids, dtype="<f4").tobytes())


def load_saliency(path) -> np.ndarray:
    with open(path, "rb") as fh:
        _expect_magic(fh, b"SALI")
        n, h, w = _read_u32(fh, 3)
        return _read_f32(fh, n * h * w).reshape(n, h, w)


# ---------------------------------------------------------------------------
# sparse point clouds and pixel associations: text
# ---------------------------------------------------------------------------

CLOUD_HEADER = "# ggsfm-cloud v1"


def save_cloud(path, points: np.ndarray, ids: np.ndarray | None = None):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if ids is None:
        ids = np.arange(len(points))
    with open(path, "w") as fh:
        fh.write(CLOUD_HEADER + "\n")
        for pid, p in zip(ids, points):
            fh.write(f"{int(pid)} " + " ".join(_FMT % v for v in p) + "\n")


def load_cloud(path) -> tuple[np.ndarray, np.ndarray]:
    """Returns (ids, points)."""
    ids, pts = [], []
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith(CLOUD_HEADER):
            raise FormatError("missing cloud header line")
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise FormatError(f"cloud line needs 4 fields, got {len(parts)}")
            ids.append(int(parts[0]))
            pts.append([float(p) for p in parts[1:]])
    return np.array(ids, dtype=np.int64), np.array(pts, dtype=np.float64).reshape(-1, 3)


def save_assoc(path, rows: np.ndarray):
    """Rows of (point_id, view, u, v) with integer pixel coordinates."""
    rows = np.asarray(rows, dtype=np.int64).reshape(-1, 4)
    with open(path, "w") as fh:
        fh.write("# point_id view u v\n")
        for r in rows:
            fh.write(f"{r[0]} {r[1]} {r[2]} {r[3]}\n")


def load_assoc(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise FormatError(f"assoc line needs 4 fields, got {len(parts)}")
            rows.append([int(float(p)) for p in parts])
    return np.array(rows, dtype=np.int64).reshape(-1, 4)


# ---------------------------------------------------------------------------
# tracks and initial points: text
# ---------------------------------------------------------------------------

def save_tracks(path, tracks):
    """Write ``track_id view u v`` lines; the anchor observation comes first."""
    with open(path, "w") as fh:
        fh.write("# track_id view u v (first line of each track is the anchor)\n")
        for tid, tr in enumerate(tracks):
            order = np.argsort(tr.views != tr.anchor_view, kind="stable")
            for j in order:
                fh.write(f"{tid} {tr.views[j]} " + _FMT % tr.uv[j, 0]
                         + " " + _FMT % tr.uv[j, 1] + "\n")


def load_tracks(path):
    from .matching import Track

    obs: dict[int, list[tuple[int, float, float]]] = {}
    order: list[int] = []
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise FormatError(f"track line needs 4 fields, got {len(parts)}")
            tid = int(parts[0])
            if tid not in obs:
                obs[tid] = []
                order.append(tid)
            obs[tid].append((int(parts[1]), float(parts[2]), float(parts[3])))
    tracks = []
    for tid in order:
        rows = obs[tid]
        views = np.array([r[0] for r in rows], dtype=np.int64)
        uv = np.array([[r[1], r[2]] for r in rows], dtype=np.float64)
        tracks.append(Track(
            anchor_view=int(views[0]),
            anchor_u=int(round(uv[0, 0])), anchor_v=int(round(uv[0, 1])),
            views=views, uv=uv, saliency=0.0))
    return tracks


def save_points_xyz(path, ids: np.ndarray, points: np.ndarray):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    with open(path, "w") as fh:
        fh.write("# id x y z\n")
        for pid, p in zip(ids, points):
            fh.write(f"{int(pid)} " + " ".join(_FMT % v for v in p) + "\n")


def load_points_xyz(path) -> tuple[np.ndarray, np.ndarray]:
    ids, pts = [], []
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise FormatError(f"points line needs 4 fields, got {len(parts)}")
            ids.append(int(parts[0]))
            pts.append([float(p) for p in parts[1:]])
    return np.array(ids, dtype=np.int64), np.array(pts, dtype=np.float64).reshape(-1, 3)


# ---------------------------------------------------------------------------
# PTCH / ROUT: refiner plug-in frames (stdin/stdout piping)
# ---------------------------------------------------------------------------

def encode_patch_frame(center: np.ndarray, half_width: float,
                       guide_norm: np.ndarray, dense_norm: np.ndarray,
                       link: np.ndarray, embeddings: np.ndarray) -> bytes:
    """One patch as a self-delimiting binary frame.

    Links are encoded as float32 local guide indices, -1 when absent.
    """
    guide_norm = np.asarray(guide_norm, dtype="<f4").reshape(-1, 3)
    dense_norm = np.asarray(dense_norm, dtype="<f4").reshape(-1, 3)
    link = np.asarray(link, dtype="<f4").reshape(-1)
    embeddings = np.asarray(embeddings, dtype="<f4")
    ng, nd = len(guide_norm), len(dense_norm)
    if len(link) != nd:
        raise FormatError("one link slot per dense point required")
    if embeddings.shape[0] != ng + nd:
        raise FormatError("one embedding row per patch point required")
    out = [b"PTCH", struct.pack("<3I", ng, nd, embeddings.shape[1])]
    out.append(np.asarray(center, dtype="<f4").tobytes())
    out.append(struct.pack("<f", float(half_width)))
    out.append(guide_norm.tobytes())
    out.append(dense_norm.tobytes())
    out.append(link.tobytes())
    out.append(np.ascontiguousarray(embeddings).tobytes())
    return b"".join(out)


def decode_patch_frame(fh: IO[bytes]) -> dict:
    _expect_magic(fh, b"PTCH")
    ng, nd, dim = _read_u32(fh, 3)
    center = _read_f32(fh, 3)
    half_width = float(_read_f32(fh, 1)[0])
    guide_norm = _read_f32(fh, ng * 3).reshape(ng, 3)
    dense_norm = _read_f32(fh, nd * 3).reshape(nd, 3)
    link = _read_f32(fh, nd).astype(np.int64)
    emb = _read_f32(fh, (ng + nd) * dim).reshape(ng + nd, dim)
    return {"center": center, "half_width": half_width,
            "guide_norm": guide_norm, "dense_norm": dense_norm,
            "link": link, "embeddings": emb}


def encode_refiner_frame(delta: np.ndarray, c_raw: np.ndarray) -> bytes:
    delta = np.asarray(delta, dtype="<f4").reshape(-1, 3)
    c_raw = np.asarray(c_raw, dtype="<f4").reshape(-1)
    if len(delta) != len(c_raw):
        raise FormatError("delta and raw confidence lengths differ")
    return (b"ROUT" + struct.pack("<I", len(delta))
            + delta.tobytes() + c_raw.tobytes())


def decode_refiner_frame(fh: IO[bytes]) -> tuple[np.ndarray, np.ndarray]:
    _expect_magic(fh, b"ROUT")
    (n,) = _read_u32(fh, 1)
    delta = _read_f32(fh, n * 3).reshape(n, 3)
    c_raw = _read_f32(fh, n)
    return delta, c_raw
