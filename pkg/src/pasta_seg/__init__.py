"""Weakly supervised anomaly segmentation by contrasting cluster distributions.

A codebook fitted on patch embeddings of a mixed corpus is projected onto an
anomaly-free reference corpus; clusters that vanish in the reference are
anomaly clusters. Patch maps or instance masks are then labelled against them.
"""

from .baseline import BaselineConfig, FeatureBag, baseline_segment, build_bag, classify_embedding, pool_object_embedding
from .clustering import ClusterCodebook, MiniBatchConfig, assign, assign_grid, fit_codebook, inertia
from .containers import ANOMALY, BACKGROUND, TARGET, FeatureGrid, LabelRaster
from .distribution import (
    AnomalyClusterSet,
    ClusterDistribution,
    PastaModel,
    build_model,
    compute_ratios,
    define_anomaly_set,
    estimate_distribution,
)
from .evaluation import ConfusionCounts, IoUReport, accumulate_confusion, aggregate_seeds, iou_report, run_sweep
from .segmentation import InstanceMaskSet, anomaly_fraction, fuse_masks, infer_patch_anomaly, upsample_nearest
from .synth import SynthConfig, generate_corpus, generate_scene
from .tensor_io import (
    load_model,
    read_feature_grid,
    read_label_raster,
    read_manifest,
    save_model,
    write_feature_grid,
    write_label_raster,
)

__version__ = "0.1.0"

__all__ = [
    "BaselineConfig",
    "FeatureBag",
    "baseline_segment",
    "build_bag",
    "classify_embedding",
    "pool_object_embedding",
    "ClusterCodebook",
    "MiniBatchConfig",
    "assign",
    "assign_grid",
    "fit_codebook",
    "inertia",
    "ANOMALY",
    "BACKGROUND",
    "TARGET",
    "FeatureGrid",
    "LabelRaster",
    "AnomalyClusterSet",
    "ClusterDistribution",
    "PastaModel",
    "build_model",
    "compute_ratios",
    "define_anomaly_set",
    "estimate_distribution",
    "ConfusionCounts",
    "IoUReport",
    "accumulate_confusion",
    "aggregate_seeds",
    "iou_report",
    "run_sweep",
    "InstanceMaskSet",
    "anomaly_fraction",
    "fuse_masks",
    "infer_patch_anomaly",
    "upsample_nearest",
    "SynthConfig",
    "generate_corpus",
    "generate_scene",
    "load_model",
    "read_feature_grid",
    "read_label_raster",
    "read_manifest",
    "save_model",
    "write_feature_grid",
    "write_label_raster",
]
