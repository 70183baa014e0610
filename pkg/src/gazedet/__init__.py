"""gazedet: end-to-end detection of people and their gaze targets.

A single forward pass over a scene image yields a fixed-size set of
instance predictions — head box, watching-inside/outside state, and a
dense gaze-target heatmap — trained with a set-matching loss.
"""

__version__ = "0.1.0"

from .core import (
    GazeHeatmap,
    GazeInstance,
    GazeTarget,
    HeadBox,
    box_center_form,
    box_from_center_form,
    box_giou,
    box_iou,
    heatmap_argmax,
    render_gaze_heatmap,
)
from .matching import (
    CostWeights,
    MatchAssignment,
    hungarian_assign,
    match_instances,
    pairwise_cost_matrix,
    total_loss,
)
from .metrics import MetricReport, auc, evaluate_split, hgt_map, l2_distance, watch_outside_ap
from .model import (
    GazeTargetDetector,
    ModelConfig,
    PredictionSet,
    load_checkpoint,
    positional_encoding_2d,
    save_checkpoint,
)

__all__ = [
    "GazeHeatmap",
    "GazeInstance",
    "GazeTarget",
    "HeadBox",
    "box_center_form",
    "box_from_center_form",
    "box_giou",
    "box_iou",
    "heatmap_argmax",
    "render_gaze_heatmap",
    "CostWeights",
    "MatchAssignment",
    "hungarian_assign",
    "match_instances",
    "pairwise_cost_matrix",
    "total_loss",
    "MetricReport",
    "auc",
    "evaluate_split",
    "hgt_map",
    "l2_distance",
    "watch_outside_ap",
    "GazeTargetDetector",
    "ModelConfig",
    "PredictionSet",
    "load_checkpoint",
    "positional_encoding_2d",
    "save_checkpoint",
    "__version__",
]
