"""vncseg - Cardiac structure segmentation in non-contrast and virtual non-contrast CT.

A 2.5D fully convolutional network with residual blocks, trained from scratch
with a soft-Dice loss, segments seven cardiac structures. The package covers
volume I/O, preprocessing, training with cross-validation, ensemble inference,
post-processing, evaluation and synthetic phantom generation.

Quick Start:
    >>> import vncseg
    >>> vncseg.generate_dataset(18, "data", base_seed=7)
    >>> cases = vncseg.load_cases("data", "vnc", vncseg.PreprocessConfig())
    >>> result = vncseg.train_model(cases[:15], cases[15:], vncseg.TrainConfig(),
    ...                             vncseg.NetworkConfig(), "runs/model")
"""

from __future__ import annotations

__version__ = "1.0.0"

from .config import ExperimentConfig, NetworkConfig, PreprocessConfig, TrainConfig
from .exceptions import (
    CheckpointError,
    ConfigError,
    FormatError,
    GeometryError,
    MissingFileError,
    ShapeError,
    SizeMismatchError,
    StorageError,
    TrainingError,
    ValidationError,
    VncSegError,
)
from .metrics import (
    CaseReport,
    EvaluationReport,
    aggregate_report,
    assd,
    dice,
    evaluate_case,
    extract_surface,
    structure_volumes,
)
from .network import Network, init_parameters, load_checkpoint, save_checkpoint
from .overlay import render_slice, write_overlays
from .parallel import WorkerPool, get_pool, set_worker_count
from .phantom import Phantom, PhantomSpec, generate_dataset, generate_phantom
from .postprocess import (
    ComponentMap,
    argmax_labels,
    connected_components,
    largest_component_filter,
)
from .preprocess import (
    extract_slab,
    gaussian_smooth,
    normalize_intensity,
    preprocess_image,
    preprocess_labels,
    resample,
    resample_to,
)
from .training import (
    FoldPlan,
    Trainer,
    TrainResult,
    adam_step,
    ensemble_predict,
    learning_rate,
    load_cases,
    make_folds,
    sample_batch,
    soft_dice_loss,
    train_model,
)
from .volume import LabelVolume, Volume, read_labels, read_volume, write_volume

__all__ = [
    # Version
    "__version__",
    # Volumes
    "Volume",
    "LabelVolume",
    "read_volume",
    "read_labels",
    "write_volume",
    # Configuration
    "ExperimentConfig",
    "PreprocessConfig",
    "NetworkConfig",
    "TrainConfig",
    "WorkerPool",
    "get_pool",
    "set_worker_count",
    # Preprocessing
    "gaussian_smooth",
    "resample",
    "resample_to",
    "normalize_intensity",
    "extract_slab",
    "preprocess_image",
    "preprocess_labels",
    # Network
    "Network",
    "init_parameters",
    "save_checkpoint",
    "load_checkpoint",
    # Training
    "soft_dice_loss",
    "adam_step",
    "learning_rate",
    "make_folds",
    "FoldPlan",
    "load_cases",
    "sample_batch",
    "Trainer",
    "TrainResult",
    "train_model",
    "ensemble_predict",
    # Post-processing
    "ComponentMap",
    "connected_components",
    "largest_component_filter",
    "argmax_labels",
    # Metrics
    "dice",
    "assd",
    "extract_surface",
    "structure_volumes",
    "CaseReport",
    "EvaluationReport",
    "evaluate_case",
    "aggregate_report",
    # Phantoms and reports
    "PhantomSpec",
    "Phantom",
    "generate_phantom",
    "generate_dataset",
    "render_slice",
    "write_overlays",
    # Exceptions
    "VncSegError",
    "FormatError",
    "MissingFileError",
    "SizeMismatchError",
    "GeometryError",
    "ShapeError",
    "ValidationError",
    "ConfigError",
    "TrainingError",
    "CheckpointError",
    "StorageError",
]
