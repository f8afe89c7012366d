"""Two-stage leaf counting on a from-scratch numpy network engine.

A SegNet-style encoder-decoder segments the plant; a regression network
counts leaves from the 4-channel ``[mask, R, G, B]`` stack.
"""
from .augment import AugmentPlan, make_count_variants
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .countnet import (
    CountArchSpec,
    CountTrainConfig,
    assemble_srgb,
    build_countnet,
    count_parameters,
    plan_shape_trace,
    predict_count,
    train_countnet,
)
from .dataset import SampleRecord, SplitConfig, load_dataset, write_dataset
from .errors import BadMagicError, CheckpointError, ConfigError, DataError, ShapeMismatchError, TruncatedCheckpointError
from .metrics import MetricsReport, count_metrics, interpret_report, seg_metrics
from .segnet import SegArchSpec, SegStage, SegTrainConfig, build_segnet, segment_image, train_segnet
from .synth import SynthConfig, generate_synthetic
from .tensor import NumericError, rng_stream

__version__ = "0.1.0"

__all__ = [
    "AugmentPlan", "BadMagicError", "Checkpoint", "CheckpointError", "ConfigError", "CountArchSpec",
    "CountTrainConfig", "DataError", "MetricsReport", "NumericError", "SampleRecord", "SegArchSpec", "SegStage",
    "SegTrainConfig", "ShapeMismatchError", "SplitConfig", "SynthConfig", "TruncatedCheckpointError",
    "assemble_srgb", "build_countnet", "build_segnet", "count_metrics", "count_parameters", "generate_synthetic",
    "interpret_report", "load_checkpoint", "load_dataset", "make_count_variants", "plan_shape_trace",
    "predict_count", "rng_stream", "save_checkpoint", "seg_metrics", "segment_image", "train_countnet",
    "train_segnet", "write_dataset",
]
