"""Image-complexity features, model, training, and metrics."""

from icar.complexity.features import ComplexityFeatures, extract_features
from icar.complexity.metrics import (
    eval_binary,
    eval_regression,
    midranks,
    pearson,
    rmse,
    roc_auc,
    spearman,
)
from icar.complexity.model import (
    ComplexityModel,
    RoutingDecision,
    classify,
    classify_scores,
    predict_score,
)
from icar.complexity.train import ComplexityTrainConfig, train_complexity

__all__ = [
    "ComplexityFeatures", "ComplexityModel", "ComplexityTrainConfig",
    "RoutingDecision",
    "classify", "classify_scores", "eval_binary", "eval_regression",
    "extract_features", "midranks", "pearson", "predict_score", "rmse",
    "roc_auc", "spearman", "train_complexity",
]
