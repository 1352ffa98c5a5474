"""Benchmark harness for sea-ice type classification from SAR scenes and ice charts."""
from .chart_labels import IGNORE, N_CLASSES, IceClass, LabelingConfig, map_sigrid_code, polygon_label, rasterize_labels
from .errors import IceBenchError
from .experiments import (
    PipelineConfig,
    emit_report,
    fair_compare,
    feature_ablation,
    run_cell,
    run_preparation_ablation,
    run_sweep,
    run_transferability,
)
from .metrics import ConfusionMatrix, MetricsReport, confusion, core_hours, evaluate, metrics_report
from .partition import PartitionContext, class_distribution, conventional_season, cryo_season, make_splits
from .preprocess import PrepConfig, compute_normalization, downscale, prepare_scene
from .refmodels import PatchRefModel, PixelRefModel, TrainConfig
from .sampling import AugmentationConfig, SamplingConfig, extract_patches, random_crop
from .scene_store import DatasetManifest, Scene, load_dataset_manifest, load_scene, write_scene
from .synthgen import SynthSpec, generate, generate_paired_shift

__version__ = "0.1.0"
