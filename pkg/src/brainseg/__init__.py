"""Brain MRI gray/white matter segmentation pipeline.

Converts 3D T1-weighted volumes into pseudo-labeled 2D slice datasets,
fine-tunes a frozen-encoder promptable segmentation model with a
three-class head, and scores predictions with Dice and IoU.
"""

from .dataset import (
    BuildConfig,
    DatasetManifest,
    ManifestEntry,
    SlicePair,
    build_dataset,
    load_slice_pair,
    split_subjects,
)
from .fallback import intensity_threshold_mask, kmeans_tissue_prior
from .metrics import MetricsReport, compare_models, dice, evaluate_model, iou
from .model import PromptSpec, SegModel, forward, init_tiny, load_pretrained, predict, save_checkpoint
from .slicing import extract_slices, fuse_mask, is_informative, resize_to_grid, stack_slices
from .tools import run_brain_extraction, run_tissue_segmentation
from .trainer import TrainConfig, TrainHistory, run_experiment, train, weighted_cross_entropy
from .volume import ProbabilityMaps, ToolConfig, Volume3D, load_volume, save_volume

__version__ = "0.1.0"

__all__ = [
    "BuildConfig",
    "DatasetManifest",
    "ManifestEntry",
    "MetricsReport",
    "ProbabilityMaps",
    "PromptSpec",
    "SegModel",
    "SlicePair",
    "ToolConfig",
    "TrainConfig",
    "TrainHistory",
    "Volume3D",
    "build_dataset",
    "compare_models",
    "dice",
    "evaluate_model",
    "extract_slices",
    "forward",
    "fuse_mask",
    "init_tiny",
    "intensity_threshold_mask",
    "iou",
    "is_informative",
    "kmeans_tissue_prior",
    "load_pretrained",
    "load_slice_pair",
    "load_volume",
    "predict",
    "resize_to_grid",
    "run_brain_extraction",
    "run_experiment",
    "run_tissue_segmentation",
    "save_checkpoint",
    "save_volume",
    "split_subjects",
    "stack_slices",
    "train",
    "weighted_cross_entropy",
]
