"""Adaptive iterative model merging for continual learning, at desk scale."""
from .controller import ControllerConfig, MergeController
from .estimator import STRATEGIES, ContinualMergeClassifier
from .exceptions import AimMergeError, ConfigError, DimensionMismatchError, DivergenceError, ValidationError
from .harness import ExperimentConfig, emit_reports, run_suite, run_task_sequence
from .metrics import AccuracyMatrix, compute_bwt, compute_fwt, compute_op
from .tasks import SequenceSpec, generate_sequence
from .trainer import ModelSpec

__version__ = "0.1.0"

__all__ = [
    "AccuracyMatrix", "AimMergeError", "ConfigError", "ContinualMergeClassifier",
    "ControllerConfig", "DimensionMismatchError", "DivergenceError", "ExperimentConfig",
    "MergeController", "ModelSpec", "STRATEGIES", "SequenceSpec", "ValidationError",
    "compute_bwt", "compute_fwt", "compute_op", "emit_reports", "generate_sequence",
    "run_suite", "run_task_sequence",
]
