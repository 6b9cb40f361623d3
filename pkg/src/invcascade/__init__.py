"""Inverse coarse-to-fine cascade for object and action proposals over CNN feature maps."""

from .cascade import CascadeConfig, ImageMaps, Proposal, ProposalCascade, Stage, run_cascade
from .featmap import FeatureMap, PyramidSpec, avg_pool, build_integral, pyramid_pool
from .geometry import Box, iou, iou_matrix, nms
from .metrics import action_recall, auc_and_budgets, average_recall, recall_at
from .refine import EdgeMap, RefineConfig, edge_score, refine_box
from .scoring import LinearModel, LinearObjectness, MiningConfig, TrainConfig, train_linear
from .tubes import GroundTruthTube, Tube, TubeLinker, best_path, extract_tubes, tube_overlap
from .windowing import ShapeBank, WindowShape, WindowShapeSelector, select_shapes

__version__ = "0.1.0"

__all__ = [
    "Box", "CascadeConfig", "EdgeMap", "FeatureMap", "GroundTruthTube", "ImageMaps",
    "LinearModel", "LinearObjectness", "MiningConfig", "Proposal", "ProposalCascade",
    "PyramidSpec", "RefineConfig", "ShapeBank", "Stage", "TrainConfig", "Tube", "TubeLinker",
    "WindowShape", "WindowShapeSelector", "action_recall", "auc_and_budgets", "avg_pool",
    "average_recall", "best_path", "build_integral", "edge_score", "extract_tubes", "iou",
    "iou_matrix", "nms", "pyramid_pool", "recall_at", "refine_box", "run_cascade",
    "select_shapes", "train_linear", "tube_overlap",
]
