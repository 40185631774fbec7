"""End-to-end orchestration: filtering, BA, triangulation, refinement, eval.

Every stage writes its artifact to the output directory so each step is
independently inspectable and re-runnable, plus a manifest.json with the
config hash, library versions and per-stage wall times (the manifest is
the only output that varies between identical runs).

Configuration lives in one INI-style file with key = value entries in
named sections; command line flags override file values. All numeric
defaults in DEFAULTS are the reference operating point.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import sys
import time
from dataclasses import dataclass, fields

import numpy as np

from . import io as ggio
from ._parallel import thread_count
from .ba import BAProblem, solve
from .errors import ConfigError, GGSfMError
from .matching import (build_tracks, confidence_masks, cycle_filter, ensemble,
                       select_ba_anchors, uniform_saliency)
from .metrics import AlignConfig, MetricReport, point_auc, pose_auc
from .refine import ExternalRefiner, baseline_refiner, refine_pointmaps
from .triangulate import triangulate_all

# reference operating point; print-defaults dumps exactly these
DEFAULTS = {
    "eps": 4.0,
    "eps_ba": 0.6,
    "eps_dlt": 0.1,
    "n_ba": 2048,
    "max_reproj": 4.0,
    "min_angle": 3.0,
    "lambda_id": 1.0,
    "alpha": 0.2,
    "budget": 400000,
    "patch_ratio": 0.2,
    "cauchy_scale": 1.0,
}

_STAGE_CODES = {
    "load": 2,
    "filter": 3,
    "masks": 4,
    "tracks": 5,
    "ba": 6,
    "triangulate": 7,
    "refine": 8,
    "eval": 9,
}


class PipelineStageError(GGSfMError):
    """A stage failed; exit_code identifies the stage."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
        self.exit_code = _STAGE_CODES[stage]


@dataclass
class PipelineConfig:
    # inputs
    matches: tuple = ()
    cameras: str = ""
    dense: str = ""
    saliency: str = ""
    gt_points: str = ""
    gt_cameras: str = ""
    out_dir: str = "."
    # thresholds (reference values in DEFAULTS)
    eps: float = DEFAULTS["eps"]
    eps_ba: float = DEFAULTS["eps_ba"]
    eps_dlt: float = DEFAULTS["eps_dlt"]
    n_ba: int = DEFAULTS["n_ba"]
    max_reproj: float = DEFAULTS["max_reproj"]
    min_angle: float = DEFAULTS["min_angle"]
    lambda_id: float = DEFAULTS["lambda_id"]
    alpha: float = DEFAULTS["alpha"]
    budget: int = DEFAULTS["budget"]
    patch_ratio: float = DEFAULTS["patch_ratio"]
    cauchy_scale: float = DEFAULTS["cauchy_scale"]
    # behavior knobs
    loss: str = "cauchy"
    fix_intrinsics: bool = False
    interp: str = "nearest"
    angle_aggregate: str = "max"
    refiner: str = "baseline"
    run_refine: bool = True
    run_eval: bool = True
    taus: tuple = (5, 10)
    unit: str = "unit"
    unit_scale: float = 1.0
    align_max_err: float = 3.0
    align_min_inlier_ratio: float = 0.8
    seed: int = 0
    threads: int = 0  # 0: take GGSFM_THREADS, else 1

    def effective_threads(self) -> int:
        return thread_count(self.threads if self.threads > 0 else None)


_LIST_KEYS = {"matches": str, "taus": int}
_BOOL_KEYS = {"run_refine", "run_eval", "fix_intrinsics"}


def _coerce(name: str, raw: str, current):
    if name in _LIST_KEYS:
        items = [s.strip() for s in raw.split(",") if s.strip()]
        return tuple(_LIST_KEYS[name](s) for s in items)
    if name in _BOOL_KEYS:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name} must be boolean, got {raw!r}")
    kind = type(current)
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name} must be {kind.__name__}, got {raw!r}")
    return raw


def parse_config(path: str | None = None,
                 overrides: dict | None = None) -> PipelineConfig:
    """Config file plus overrides (flags win over the file)."""
    cfg = PipelineConfig()
    known = {f.name for f in fields(PipelineConfig)}
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file not found: {path}")
        for section in parser.sections():
            for key, raw in parser.items(section):
                if key not in known:
                    raise ConfigError(
                        f"unknown config key {key!r} in [{section}]")
                setattr(cfg, key, _coerce(key, raw, getattr(cfg, key)))
    for key, value in (overrides or {}).items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        if value is None:
            continue
        if isinstance(value, str):
            value = _coerce(key, value, getattr(cfg, key))
        setattr(cfg, key, value)
    return cfg


def config_text(cfg: PipelineConfig) -> str:
    """Canonical one-line-per-key rendering, used for the config hash."""
    lines = []
    for f in sorted(fields(PipelineConfig), key=lambda f: f.name):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: PipelineConfig) -> str:
    return hashlib.sha256(config_text(cfg).encode()).hexdigest()


def default_lines() -> list[str]:
    return [f"{k}={v}" for k, v in DEFAULTS.items()]


def _stage(name: str, timings: dict, fn):
    start = time.perf_counter()
    try:
        result = fn()
    except PipelineStageError:
        raise
    except Exception as e:
        raise PipelineStageError(name, str(e)) from e
    timings[name] = time.perf_counter() - start
    return result


def run_pipeline(cfg: PipelineConfig) -> dict:
    """Execute every stage, writing artifacts into cfg.out_dir.

    Returns a summary dict with artifact paths and reports. Raises
    PipelineStageError with a stage-specific exit code on failure.
    """
    from pathlib import Path

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timings: dict[str, float] = {}
    summary: dict = {"out_dir": str(out)}

    def load():
        if not cfg.matches:
            raise PipelineStageError("load", "no matches file configured")
        if len(cfg.matches) > 2:
            raise PipelineStageError("load", "at most two matchers supported")
        graphs = []
        for p in cfg.matches:
            if not Path(p).is_file():
                raise PipelineStageError("load",
                                         f"matches file not found: {p}")
            graphs.append(ggio.load_corr(p))
        if not Path(cfg.cameras).is_file():
            raise PipelineStageError("load",
                                     f"cameras file not found: {cfg.cameras}")
        cams = ggio.load_cameras(cfg.cameras)
        if not Path(cfg.dense).is_file():
            raise PipelineStageError("load",
                                     f"dense map file not found: {cfg.dense}")
        dense = ggio.load_pointmaps(cfg.dense)
        sal = ggio.load_saliency(cfg.saliency) if cfg.saliency else None
        gt_pm = ggio.load_pointmaps(cfg.gt_points) if cfg.gt_points else None
        gt_cams = ggio.load_cameras(cfg.gt_cameras) if cfg.gt_cameras else None
        return graphs, cams, dense, sal, gt_pm, gt_cams

    graphs, init_cams, dense, sal, gt_pm, gt_cams = \
        _stage("load", timings, load)

    def filt():
        filtered = [cycle_filter(g, cfg.eps, interp=cfg.interp)
                    for g in graphs]
        g = ensemble(filtered[0], filtered[1]) if len(filtered) == 2 \
            else filtered[0]
        ggio.save_corr(out / "filtered.corr", g)
        return g

    graph = _stage("filter", timings, filt)
    summary["filtered"] = str(out / "filtered.corr")

    def masks():
        g_ba, g_dlt = confidence_masks(graph, cfg.eps_ba, cfg.eps_dlt)
        ggio.save_corr(out / "ba_mask.corr", g_ba)
        ggio.save_corr(out / "dlt_mask.corr", g_dlt)
        return g_ba, g_dlt

    g_ba, g_dlt = _stage("masks", timings, masks)

    def tracks_fn():
        saliency = sal if sal is not None \
            else uniform_saliency(graph.n_views, graph.H, graph.W)
        all_tracks = build_tracks(g_ba)
        selected = select_ba_anchors(all_tracks, saliency, cfg.n_ba)
        # initial 3D estimates come from the dense map at the anchor pixel
        kept, pts0 = [], []
        for tr in selected:
            if dense.valid[tr.anchor_view, tr.anchor_v, tr.anchor_u]:
                kept.append(tr)
                pts0.append(dense.points[tr.anchor_view, tr.anchor_v,
                                         tr.anchor_u])
        if not kept:
            raise PipelineStageError(
                "tracks", "no track has a valid dense anchor point")
        ggio.save_tracks(out / "tracks_ba.txt", kept)
        pts0 = np.asarray(pts0)
        ggio.save_points_xyz(out / "points_init.xyz",
                             np.arange(len(kept)), pts0)
        return kept, pts0

    ba_tracks, pts0 = _stage("tracks", timings, tracks_fn)
    summary["n_ba_tracks"] = len(ba_tracks)

    def ba_fn():
        problem = BAProblem(cameras=init_cams, points=pts0, tracks=ba_tracks,
                            loss_scale=cfg.cauchy_scale,
                            refine_intrinsics=not cfg.fix_intrinsics)
        cams, pts, report = solve(problem, loss=cfg.loss)
        ggio.save_cameras(out / "cameras_ba.txt", cams)
        with open(out / "ba_report.txt", "w") as fh:
            fh.write(f"initial_cost={report.initial_cost:.17g}\n")
            fh.write(f"final_cost={report.final_cost:.17g}\n")
            fh.write(f"iterations={report.iterations}\n")
            fh.write(f"converged={report.converged}\n")
            fh.write(f"max_residual={report.max_residual:.17g}\n")
        return cams, report

    cams_ba, ba_report = _stage("ba", timings, ba_fn)
    summary["ba_report"] = ba_report
    summary["cameras_ba"] = str(out / "cameras_ba.txt")

    def tri():
        cloud = triangulate_all(g_dlt, cams_ba, max_reproj=cfg.max_reproj,
                                min_max_angle=cfg.min_angle,
                                angle_aggregate=cfg.angle_aggregate)
        ggio.save_cloud(out / "cloud.txt", cloud.points)
        ggio.save_assoc(out / "assoc.txt", cloud.assoc_rows())
        return cloud

    cloud = _stage("triangulate", timings, tri)
    summary["n_guided_points"] = len(cloud.points)
    summary["cloud"] = str(out / "cloud.txt")

    refined = dense
    if cfg.run_refine:
        def refine_fn():
            if cfg.refiner == "baseline":
                refiner = baseline_refiner
            elif cfg.refiner.startswith("extern:"):
                refiner = ExternalRefiner(cfg.refiner[len("extern:"):])
            else:
                raise ConfigError(f"unknown refiner {cfg.refiner!r}")
            fused, patches, _ = refine_pointmaps(
                dense, cloud, r_ratio=cfg.patch_ratio, budget=cfg.budget,
                refiner=refiner, threads=cfg.effective_threads())
            ggio.save_pointmaps(out / "refined.pmap", fused)
            return fused, len(patches)

        refined, n_patches = _stage("refine", timings, refine_fn)
        summary["n_patches"] = n_patches
        summary["refined"] = str(out / "refined.pmap")

    if cfg.run_eval and gt_pm is not None:
        def eval_fn():
            align = AlignConfig(max_err=cfg.align_max_err,
                                min_inlier_ratio=cfg.align_min_inlier_ratio,
                                seed=cfg.seed)
            lines = []
            rep_in = point_auc(dense, gt_pm, cfg.taus, align=align,
                               unit_scale=cfg.unit_scale, unit=cfg.unit)
            lines += [f"input_{s}" for s in rep_in.lines()]
            rep_out = point_auc(refined, gt_pm, cfg.taus, align=align,
                                unit_scale=cfg.unit_scale, unit=cfg.unit)
            lines += [f"refined_{s}" for s in rep_out.lines()]
            if gt_cams is not None:
                pa = pose_auc(cams_ba, gt_cams)
                lines += [f"pose_auc@{k:g}={v:.17g}" for k, v in
                          sorted(pa.items())]
            with open(out / "eval.txt", "w") as fh:
                fh.write("\n".join(lines) + "\n")
            report = MetricReport(recall_at=rep_out.recall_at,
                                  auc_at=rep_out.auc_at,
                                  n_valid=rep_out.n_valid, unit=cfg.unit)
            if gt_cams is not None:
                report.pose_auc = pa
            return report, rep_in

        eval_report, eval_input = _stage("eval", timings, eval_fn)
        summary["eval"] = eval_report
        summary["eval_input"] = eval_input
        summary["eval_path"] = str(out / "eval.txt")

    from . import __version__ as pkg_version
    manifest = {
        "config_sha256": config_hash(cfg),
        "versions": {
            "ggsfm": pkg_version,
            "numpy": np.__version__,
            "python": "%d.%d.%d" % sys.version_info[:3],
        },
        "stage_seconds": timings,
    }
    try:
        import scipy
        manifest["versions"]["scipy"] = scipy.__version__
    except ImportError:
        pass
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    summary["manifest"] = str(out / "manifest.json")
    summary["timings"] = timings
    return summary
