"""Geometry-guided sparse-view structure from motion.

Feed-forward initializations (cameras plus dense per-pixel point maps)
are upgraded by classical multi-view geometry: dense correspondences are
filtered for cycle consistency, a robust sparse bundle adjustment
refines the cameras, filtered DLT triangulation produces a reliable
guided point cloud, and a patch-based refiner pulls the dense maps onto
that guidance. Evaluation utilities report point/pose AUC, chamfer and
depth metrics.
"""

__version__ = "0.1.0"

from .alignment import Sim3, robust_umeyama, transform_camera, umeyama
from .ba import BAProblem, BAReport, cauchy, residual, \
    residual_and_jacobian, solve
from .errors import (AlignmentFailed, BudgetUnsatisfiable, CheiralityError,
                     ConfigError, DegenerateConfiguration, DegenerateGeometry,
                     DegenerateProblem, DimensionMismatch, EmptyCloud,
                     FormatError, GGSfMError, InsufficientInliers,
                     NoValidPixels, NonFiniteCost, ThresholdOrderError)
from .matching import (CorrGraph, Track, build_tracks, confidence_masks,
                       cycle_errors, cycle_filter, ensemble,
                       gradient_saliency, select_ba_anchors,
                       uniform_saliency)
from .metrics import (AlignConfig, MetricReport, chamfer, depth_metrics,
                      point_auc, pose_auc, pose_errors)
from .pipeline import (DEFAULTS, PipelineConfig, PipelineStageError,
                       parse_config, run_pipeline)
from .refine import (ExternalRefiner, Patch, RefinerOutput, baseline_refiner,
                     confidence, embed, extract_patches, fuse, loss_conf,
                     loss_conf_grad, loss_id, refine_pointmaps, scene_radius,
                     total_loss)
from .scene import (CameraParams, PixelCoord, PointMapSet, project,
                    project_points, quat_conjugate, quat_from_axis_angle,
                    quat_from_matrix,
                    quat_multiply, quat_normalize, quat_to_matrix, rotate)
from .synth import SynthConfig, SyntheticScene, drift_field, generate, \
    unproject
from .triangulate import (GuidedCloud, dlt_point, triangulate_all,
                          triangulation_angle)

__all__ = [
    "__version__",
    "AlignConfig", "AlignmentFailed", "BAProblem", "BAReport",
    "BudgetUnsatisfiable", "CameraParams", "CheiralityError", "ConfigError",
    "CorrGraph", "DEFAULTS", "DegenerateConfiguration", "DegenerateGeometry",
    "DegenerateProblem",
    "DimensionMismatch", "EmptyCloud", "ExternalRefiner", "FormatError",
    "GGSfMError", "GuidedCloud", "InsufficientInliers", "MetricReport",
    "NoValidPixels", "NonFiniteCost", "Patch", "PipelineConfig",
    "PipelineStageError", "PixelCoord", "PointMapSet", "RefinerOutput",
    "Sim3", "SynthConfig", "SyntheticScene", "ThresholdOrderError", "Track",
    "baseline_refiner", "build_tracks", "cauchy", "chamfer",
    "confidence", "confidence_masks", "cycle_errors", "cycle_filter",
    "depth_metrics", "dlt_point", "drift_field", "embed", "ensemble",
    "extract_patches", "fuse", "generate", "gradient_saliency", "loss_conf",
    "loss_conf_grad", "loss_id", "parse_config", "point_auc", "pose_auc",
    "pose_errors", "project", "project_points", "quat_from_axis_angle",
    "quat_conjugate", "quat_from_matrix", "quat_multiply", "quat_normalize", "quat_to_matrix",
    "refine_pointmaps", "residual", "residual_and_jacobian", "robust_umeyama",
    "rotate", "run_pipeline", "scene_radius", "select_ba_anchors", "solve",
    "total_loss", "transform_camera", "triangulate_all",
    "triangulation_angle", "umeyama", "uniform_saliency", "unproject",
]
