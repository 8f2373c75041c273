"""Experiment orchestration: training, adaptation, toy demo, metrics, checkpoints."""

from .checkpoint import CheckpointError, CheckpointVersionError, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config, parse_config_text
from .evaluation import FrozenModelViolation, run_adaptation_eval
from .metrics import MetricsRow, bootstrap_ci, summarize, write_metrics
from .training import TrainingResult, run_training, transfer_return

__all__ = [
    "CheckpointError",
    "CheckpointVersionError",
    "ExperimentConfig",
    "FrozenModelViolation",
    "MetricsRow",
    "TrainingResult",
    "bootstrap_ci",
    "load_checkpoint",
    "load_config",
    "parse_config_text",
    "run_adaptation_eval",
    "run_training",
    "save_checkpoint",
    "summarize",
    "transfer_return",
    "write_metrics",
]
