"""
Training, evaluation, checkpoint persistence and the ablation runner
"""
from nearquery.harness.ablation import DEFAULT_GRID, ablate
from nearquery.harness.checkpoint import Checkpoint, load_checkpoint, load_into, save_checkpoint
from nearquery.harness.metrics import MetricsReport, evaluate_metrics
from nearquery.harness.trainer import TrainResult, evaluate_model, model_from_checkpoint, train

__all__ = [
    "DEFAULT_GRID",
    "ablate",
    "Checkpoint",
    "load_checkpoint",
    "load_into",
    "save_checkpoint",
    "MetricsReport",
    "evaluate_metrics",
    "TrainResult",
    "evaluate_model",
    "model_from_checkpoint",
    "train",
]
