"""Weakly supervised classification and localization toolkit.

A numpy library for training image classifiers on noisy, weakly labeled data
mixed with curated data, with a score-map head that localizes the evidence for
each class. Ships a synthetic dataset generator with exact localization ground
truth so every claim is testable at desk scale, plus a ``wsloc`` CLI.
"""

__version__ = "0.1.0"

from .data import (
    DatasetManifest,
    ImageRecord,
    ManifestError,
    MixComponent,
    MixSpec,
    compose_mix,
    filter_min_dimension,
    load_dataset,
    load_manifest,
    save_dataset,
    save_manifest,
    split_train_val,
)
from .loc import BoundingBox, iou, localize, mask_to_boxes, threshold_heatmap
from .metrics import confusion_matrix, topk_accuracy
from .model import (
    BaseModel,
    Heatmap,
    ToyBackbone,
    WslHead,
    WslModel,
    bilinear_resize,
    compute_cam,
    global_average_pool,
    init_wsl_from_base,
    spatial_average_pool,
    spatial_max_pool,
    wsl_forward,
)
from .store import ImageStore
from .sweep import SweepResult, SweepRow, emit_report, parse_report_csv, run_mixing_sweep
from .synth import SynthConfig, generate_dataset, make_clean_test_set
from .train import (
    Checkpoint,
    TrainConfig,
    cross_entropy,
    grad_check,
    load_checkpoint,
    predict_logits,
    save_checkpoint,
    train_base,
    train_wsl,
)

__all__ = [
    "BaseModel",
    "BoundingBox",
    "Checkpoint",
    "DatasetManifest",
    "Heatmap",
    "ImageRecord",
    "ImageStore",
    "ManifestError",
    "MixComponent",
    "MixSpec",
    "SweepResult",
    "SweepRow",
    "SynthConfig",
    "ToyBackbone",
    "TrainConfig",
    "WslHead",
    "WslModel",
    "bilinear_resize",
    "compose_mix",
    "compute_cam",
    "confusion_matrix",
    "cross_entropy",
    "emit_report",
    "filter_min_dimension",
    "generate_dataset",
    "global_average_pool",
    "grad_check",
    "init_wsl_from_base",
    "iou",
    "load_checkpoint",
    "load_dataset",
    "load_manifest",
    "localize",
    "make_clean_test_set",
    "mask_to_boxes",
    "parse_report_csv",
    "predict_logits",
    "run_mixing_sweep",
    "save_checkpoint",
    "save_dataset",
    "save_manifest",
    "spatial_average_pool",
    "spatial_max_pool",
    "split_train_val",
    "threshold_heatmap",
    "topk_accuracy",
    "train_base",
    "train_wsl",
    "wsl_forward",
]
