"""Stuttering-event detection from speech with a multi-branch TDNN.

The pipeline: 20-coefficient MFCC matrices from 3-second clips, a shared
time-delay encoder with statistical pooling, and three classifier branches
(fluent/disfluent, disfluency type, podcast id). Training objectives:
a stutter-only baseline, multi-task interpolation with the podcast loss,
and adversarial podcast-invariance via a gradient reversal layer with a
staged schedule. Everything runs on NumPy with explicit backpropagation.
"""

from .checkpoint import inspect_checkpoint, load_checkpoint, save_checkpoint
from .data import (
    ClipRecord,
    DatasetSplit,
    SyntheticConfig,
    adapt_sep28k,
    generate_synthetic,
    kfold,
    load_manifest,
    split_by_podcast,
    split_within_podcast,
    write_manifest,
)
from .evaluate import (
    MetricsReport,
    ProbeResult,
    confusion,
    evaluate_model,
    export_embeddings,
    metrics,
    speaker_probe,
)
from .features import AudioClip, MfccConfig, compute_mfcc, extract_features, read_wav
from .model import (
    ArchConfig,
    CLASS_NAMES,
    MultiBranchModel,
    StutterClass,
    build_model,
)
from .training import EarlyStopper, TrainConfig, TrainResult, train

__version__ = "0.1.0"

__all__ = [
    "ArchConfig",
    "AudioClip",
    "CLASS_NAMES",
    "ClipRecord",
    "DatasetSplit",
    "EarlyStopper",
    "MetricsReport",
    "MfccConfig",
    "MultiBranchModel",
    "ProbeResult",
    "StutterClass",
    "SyntheticConfig",
    "TrainConfig",
    "TrainResult",
    "adapt_sep28k",
    "build_model",
    "compute_mfcc",
    "confusion",
    "evaluate_model",
    "export_embeddings",
    "extract_features",
    "generate_synthetic",
    "inspect_checkpoint",
    "kfold",
    "load_checkpoint",
    "load_manifest",
    "metrics",
    "read_wav",
    "save_checkpoint",
    "speaker_probe",
    "split_by_podcast",
    "split_within_podcast",
    "train",
    "write_manifest",
]
