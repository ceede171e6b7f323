"""Optimisation, evaluation and the ablation grid."""
from stam.training.ablation import AblationCell, AblationReport, gap_summary, run_ablation
from stam.training.core import (
    EpochMetrics,
    TrainConfig,
    TrainResult,
    confusion_matrix,
    cross_entropy_loss,
    evaluate,
    evaluate_arrays,
    fit_arrays,
    mean_loss,
    predict_logits,
    sgd_step,
    train,
)

__all__ = [
    "AblationCell", "AblationReport", "gap_summary", "run_ablation", "EpochMetrics", "TrainConfig",
    "TrainResult", "confusion_matrix", "cross_entropy_loss", "evaluate", "evaluate_arrays",
    "fit_arrays", "mean_loss", "predict_logits", "sgd_step", "train",
]
