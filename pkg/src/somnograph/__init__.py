"""Temporal sleep-stage classification from multichannel polysomnography."""

from .evaluation import MetricsReport, compute_metrics, confusion_matrix, occlusion_probe, transition_matrix
from .features import FEATURE_NAMES, FeatureBaseline, extract_epoch_features, extract_features
from .model import (
    ModelConfig,
    MultivariateNet,
    TimeDistributedNet,
    TrainSpec,
    balanced_batches,
    load_model,
    predict_record,
    save_model,
    train_stage1,
    train_stage2,
)
from .preprocess import EpochSet, design_lowpass, filtfilt, preprocess_record, standardize
from .signal_io import Hypnogram, Record, make_markov_record, make_synthetic_record, read_edf, write_edf
from .stages import BANDS, STAGE_BAND, SleepStage

__version__ = "0.1.0"

__all__ = [
    "MetricsReport",
    "compute_metrics",
    "confusion_matrix",
    "occlusion_probe",
    "transition_matrix",
    "FEATURE_NAMES",
    "FeatureBaseline",
    "extract_epoch_features",
    "extract_features",
    "ModelConfig",
    "MultivariateNet",
    "TimeDistributedNet",
    "TrainSpec",
    "balanced_batches",
    "load_model",
    "predict_record",
    "save_model",
    "train_stage1",
    "train_stage2",
    "EpochSet",
    "design_lowpass",
    "filtfilt",
    "preprocess_record",
    "standardize",
    "Hypnogram",
    "Record",
    "make_markov_record",
    "make_synthetic_record",
    "read_edf",
    "write_edf",
    "BANDS",
    "STAGE_BAND",
    "SleepStage",
]
