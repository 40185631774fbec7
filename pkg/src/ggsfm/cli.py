"""Command line entry points for every pipeline stage.

Subcommands: synth, filter-matches, ba, triangulate, align, refine,
eval, pipeline, print-defaults. Stage failures inside `pipeline` exit
with a stage-specific code (load=2, filter=3, masks=4, tracks=5, ba=6,
triangulate=7, refine=8, eval=9); other errors exit 1.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import io as ggio
from .alignment import robust_umeyama, umeyama
from .ba import BAProblem, solve
from .errors import ConfigError, FormatError, GGSfMError
from .matching import confidence_masks, cycle_filter, ensemble
from .metrics import AlignConfig, point_auc, pose_auc
from .pipeline import (PipelineConfig, PipelineStageError, default_lines,
                       parse_config, run_pipeline)
from .refine import ExternalRefiner, baseline_refiner, refine_pointmaps
from .synth import SynthConfig, generate
from .triangulate import GuidedCloud, triangulate_all


def _add_threads(p: argparse.ArgumentParser):
    p.add_argument("--threads", type=int, default=0,
                   help="worker threads (0: use GGSFM_THREADS or 1)")


def _load_synth_config(path: str) -> SynthConfig:
    try:
        import tomllib  # python >= 3.11
    except ModuleNotFoundError:
        import tomli as tomllib
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    known = set(SynthConfig.__dataclass_fields__)
    bad = set(raw) - known
    if bad:
        raise ConfigError(f"unknown synth config keys: {sorted(bad)}")
    return SynthConfig(**raw)


def _cmd_synth(args) -> int:
    cfg = _load_synth_config(args.config) if args.config else SynthConfig()
    scene = generate(cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ggio.save_cameras(out / "gt_cameras.txt", scene.cameras)
    ggio.save_cameras(out / "init_cameras.txt", scene.init_cameras)
    ggio.save_pointmaps(out / "gt.pmap", scene.maps)
    ggio.save_pointmaps(out / "dense.pmap", scene.init_maps)
    ggio.save_corr(out / "matches.corr", scene.graph)
    ggio.save_cloud(out / "points.txt", scene.points)
    print(f"wrote scene with {len(scene.points)} points, "
          f"{cfg.n_views} views to {out}")
    return 0


def _cmd_filter_matches(args) -> int:
    g = cycle_filter(ggio.load_corr(args.matches), args.eps,
                     interp=args.interp)
    if args.matches2:
        g2 = cycle_filter(ggio.load_corr(args.matches2), args.eps,
                          interp=args.interp)
        g = ensemble(g, g2)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ggio.save_corr(out / "filtered.corr", g)
    g_ba, g_dlt = confidence_masks(g, args.eps_ba, args.eps_dlt)
    ggio.save_corr(out / "ba_mask.corr", g_ba)
    ggio.save_corr(out / "dlt_mask.corr", g_dlt)
    n = sum(int(v.sum()) for v in g.valid.values())
    print(f"filtered matches: {n} valid entries")
    return 0


def _cmd_ba(args) -> int:
    cams = ggio.load_cameras(args.cameras)
    tracks = ggio.load_tracks(args.tracks)
    ids, xyz = ggio.load_points_xyz(args.points)
    by_id = {int(i): p for i, p in zip(ids, xyz)}
    try:
        pts0 = np.array([by_id[tid] for tid in range(len(tracks))])
    except KeyError as missing:
        raise FormatError(f"no initial point for track {missing}") from None
    problem = BAProblem(cameras=cams, points=pts0, tracks=tracks,
                        loss_scale=args.cauchy_scale,
                        refine_intrinsics=not args.fix_intrinsics)
    cams_out, pts_out, report = solve(problem, loss=args.loss,
                                      max_iters=args.max_iters)
    ggio.save_cameras(args.out, cams_out)
    if args.out_points:
        ggio.save_points_xyz(args.out_points, np.arange(len(pts_out)),
                             pts_out)
    print(f"ba: cost {report.initial_cost:.6g} -> {report.final_cost:.6g} "
          f"in {report.iterations} iterations")
    return 0


def _cmd_triangulate(args) -> int:
    graph = ggio.load_corr(args.matches)
    cams = ggio.load_cameras(args.cameras)
    cloud = triangulate_all(graph, cams, max_reproj=args.max_reproj,
                            min_max_angle=args.min_angle,
                            angle_aggregate=args.angle_aggregate)
    ggio.save_cloud(args.out_cloud, cloud.points)
    ggio.save_assoc(args.out_assoc, cloud.assoc_rows())
    print(f"triangulated {len(cloud.points)} points")
    return 0


def _cmd_align(args) -> int:
    _, src = ggio.load_cloud(args.src)
    _, dst = ggio.load_cloud(args.dst)
    if args.robust:
        sim3, inliers = robust_umeyama(
            src, dst, max_err=args.max_err,
            min_inlier_ratio=args.min_inlier_ratio, seed=args.seed)
        extra = [f"inliers={int(inliers.sum())}/{len(src)}"]
    else:
        sim3 = umeyama(src, dst)
        extra = []
    m = sim3.matrix()
    lines = [" ".join(f"{v:.17g}" for v in row) for row in m]
    lines.append(f"scale={sim3.s:.17g}")
    lines += extra
    text = "\n".join(lines)
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("# ggsfm-sim3 v1\n" + text + "\n")
    return 0


def _cmd_refine(args) -> int:
    dense = ggio.load_pointmaps(args.dense)
    ids, pts = ggio.load_cloud(args.guide)
    del ids
    rows = ggio.load_assoc(args.assoc)
    n, h, w = dense.shape
    cloud = GuidedCloud.from_assoc_rows(pts, rows, n, h, w)
    if args.refiner == "baseline":
        refiner = baseline_refiner
    elif args.refiner.startswith("extern:"):
        refiner = ExternalRefiner(args.refiner[len("extern:"):])
    else:
        raise ConfigError(f"unknown refiner {args.refiner!r}")
    fused, patches, _ = refine_pointmaps(dense, cloud,
                                         r_ratio=args.patch_ratio,
                                         budget=args.budget, refiner=refiner,
                                         threads=args.threads or None)
    ggio.save_pointmaps(args.out, fused)
    print(f"refined {n}x{h}x{w} dense maps with {len(patches)} patches")
    return 0


def _cmd_eval(args) -> int:
    pred = ggio.load_pointmaps(args.pred)
    gt = ggio.load_pointmaps(args.gt)
    taus = [int(s) for s in args.tau.split(",") if s]
    align = None if args.no_align else AlignConfig(
        max_err=args.align_max_err,
        min_inlier_ratio=args.align_min_inlier_ratio, seed=args.seed)
    report = point_auc(pred, gt, taus, align=align,
                       unit_scale=args.unit_scale, unit=args.unit)
    lines = report.lines()
    if args.pose_gt:
        if not args.pose_pred:
            raise ConfigError("--pose-pred is required with --pose-gt")
        pa = pose_auc(ggio.load_cameras(args.pose_pred),
                      ggio.load_cameras(args.pose_gt))
        lines += [f"pose_auc@{k:g}={v:.17g}" for k, v in sorted(pa.items())]
    text = "\n".join(lines)
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write("threshold,recall\n")
            for k in sorted(report.recall_at):
                fh.write(f"{k},{report.recall_at[k]:.17g}\n")
    return 0


def _cmd_pipeline(args) -> int:
    overrides = {k: getattr(args, k) for k in (
        "cameras", "dense", "saliency", "gt_points", "gt_cameras", "out_dir",
        "eps", "eps_ba", "eps_dlt", "n_ba", "max_reproj", "min_angle",
        "lambda_id", "alpha", "budget", "patch_ratio", "cauchy_scale",
        "loss", "refiner", "unit", "unit_scale", "seed", "taus",
        "align_max_err", "align_min_inlier_ratio",
        "fix_intrinsics") if getattr(args, k) is not None}
    if args.matches:
        overrides["matches"] = tuple(args.matches)
    if args.threads:
        overrides["threads"] = args.threads
    cfg = parse_config(args.config, overrides)
    summary = run_pipeline(cfg)
    print(f"pipeline complete: {summary['out_dir']}")
    if "eval" in summary:
        for k in sorted(summary["eval"].auc_at):
            print(f"refined auc@{k}={summary['eval'].auc_at[k]:.17g}")
    return 0


def _cmd_print_defaults(args) -> int:
    del args
    for line in default_lines():
        print(line)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="ggsfm",
        description="Geometry-guided structure-from-motion pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("synth", help="generate a synthetic scene")
    q.add_argument("--config", default=None, help="TOML scene config")
    q.add_argument("--out-dir", required=True)
    q.set_defaults(fn=_cmd_synth)

    q = sub.add_parser("filter-matches",
                       help="cycle filter, ensemble and confidence masks")
    q.add_argument("--matches", required=True)
    q.add_argument("--matches2", default=None,
                   help="second matcher to ensemble")
    q.add_argument("--eps", type=float, default=4.0)
    q.add_argument("--eps-ba", type=float, default=0.6)
    q.add_argument("--eps-dlt", type=float, default=0.1)
    q.add_argument("--interp", choices=("nearest", "bilinear"),
                   default="nearest")
    q.add_argument("--out-dir", required=True)
    q.set_defaults(fn=_cmd_filter_matches)

    q = sub.add_parser("ba", help="bundle adjust cameras on anchor tracks")
    q.add_argument("--cameras", required=True)
    q.add_argument("--tracks", required=True,
                   help="track file (track_id view u v)")
    q.add_argument("--points", required=True,
                   help="initial track points (track_id x y z)")
    q.add_argument("--out", required=True)
    q.add_argument("--out-points", default=None,
                   help="also write the refined track points")
    q.add_argument("--cauchy-scale", type=float, default=1.0,
                   help="robust loss scale in pixels")
    q.add_argument("--fix-intrinsics", action="store_true",
                   help="keep fx fy cx cy at their input values")
    q.add_argument("--loss", choices=("cauchy", "trivial"), default="cauchy")
    q.add_argument("--max-iters", type=int, default=100)
    q.set_defaults(fn=_cmd_ba)

    q = sub.add_parser("triangulate", help="DLT triangulation with filters")
    q.add_argument("--matches", required=True, help="DLT-masked CORR file")
    q.add_argument("--cameras", required=True)
    q.add_argument("--max-reproj", type=float, default=4.0)
    q.add_argument("--min-angle", type=float, default=3.0)
    q.add_argument("--angle-aggregate", choices=("max", "min"),
                   default="max")
    q.add_argument("--out-cloud", required=True)
    q.add_argument("--out-assoc", required=True)
    q.set_defaults(fn=_cmd_triangulate)

    q = sub.add_parser("align", help="similarity alignment of two clouds")
    q.add_argument("--src", required=True)
    q.add_argument("--dst", required=True)
    q.add_argument("--robust", action="store_true")
    q.add_argument("--max-err", type=float, default=0.03)
    q.add_argument("--min-inlier-ratio", type=float, default=0.8)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", default=None)
    q.set_defaults(fn=_cmd_align)

    q = sub.add_parser("refine", help="patch-based dense map refinement")
    q.add_argument("--dense", required=True)
    q.add_argument("--guide", required=True, help="guided cloud text file")
    q.add_argument("--assoc", required=True)
    q.add_argument("--patch-ratio", type=float, default=0.2)
    q.add_argument("--budget", type=int, default=400000)
    q.add_argument("--refiner", default="baseline",
                   help="baseline or extern:<command>")
    q.add_argument("--out", required=True)
    _add_threads(q)
    q.set_defaults(fn=_cmd_refine)

    q = sub.add_parser("eval", help="point and pose metrics")
    q.add_argument("--pred", required=True)
    q.add_argument("--gt", required=True)
    q.add_argument("--unit", default="unit")
    q.add_argument("--unit-scale", type=float, default=1.0,
                   help="world length of one dataset unit")
    q.add_argument("--tau", default="5,10")
    q.add_argument("--no-align", action="store_true")
    q.add_argument("--align-max-err", type=float, default=3.0,
                   help="robust alignment threshold in dataset units")
    q.add_argument("--align-min-inlier-ratio", type=float, default=0.8)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--pose-gt", default=None)
    q.add_argument("--pose-pred", default=None)
    q.add_argument("--out", default=None)
    q.add_argument("--csv", default=None, help="recall curve output")
    q.set_defaults(fn=_cmd_eval)

    q = sub.add_parser("pipeline", help="run every stage end to end")
    q.add_argument("--config", default=None, help="INI config file")
    q.add_argument("--matches", action="append", default=None,
                   help="CORR file, repeat for a second matcher")
    for name in ("cameras", "dense", "saliency", "gt-points", "gt-cameras",
                 "out-dir", "loss", "refiner", "unit", "taus"):
        q.add_argument(f"--{name}", default=None)
    for name in ("eps", "eps-ba", "eps-dlt", "max-reproj", "min-angle",
                 "lambda-id", "alpha", "patch-ratio", "cauchy-scale",
                 "unit-scale", "align-max-err", "align-min-inlier-ratio"):
        q.add_argument(f"--{name}", type=float, default=None)
    q.add_argument("--n-ba", type=int, default=None)
    q.add_argument("--budget", type=int, default=None)
    q.add_argument("--seed", type=int, default=None)
    q.add_argument("--fix-intrinsics", action="store_true", default=None)
    _add_threads(q)
    q.set_defaults(fn=_cmd_pipeline)

    q = sub.add_parser("print-defaults",
                       help="dump the reference parameter values")
    q.set_defaults(fn=_cmd_print_defaults)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", 0):
        os.environ["GGSFM_THREADS"] = str(args.threads)
    try:
        return args.fn(args)
    except PipelineStageError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except GGSfMError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
