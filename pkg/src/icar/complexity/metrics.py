"""Regression and binary-classification metrics for complexity models.

SRCC is Pearson correlation applied to midranks; ROC-AUC is the
Mann-Whitney rank statistic with tie midranks. Both are exact — no curve
interpolation anywhere.
"""

from __future__ import annotations

import numpy as np

from icar.errors import UndefinedMetricError


def midranks(values) -> np.ndarray:
    """1-based ranks with ties sharing their average position."""
    x = np.asarray(values, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size)
    xs = x[order]
    i = 0
    while i < x.size:
        j = i
        while j < x.size and xs[j] == xs[i]:
            j += 1
        ranks[order[i:j]] = (i + j + 1) / 2.0
        i = j
    return ranks


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size != b.size:
        raise UndefinedMetricError(
            f"length mismatch: {a.size} predictions vs {b.size} targets"
        )
    if a.size < 2:
        raise UndefinedMetricError(f"need at least 2 points, got {a.size}")
    ac, bc = a - a.mean(), b - b.mean()
    denom = np.sqrt((ac * ac).sum() * (bc * bc).sum())
    if denom == 0.0:
        raise UndefinedMetricError("zero variance makes correlation undefined")
    return float((ac * bc).sum() / denom)


def spearman(a, b) -> float:
    return pearson(midranks(a), midranks(b))


def rmse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size != b.size or a.size == 0:
        raise UndefinedMetricError(
            f"rmse needs equal nonempty lengths, got {a.size} and {b.size}"
        )
    return float(np.sqrt(np.mean((a - b) ** 2)))


def eval_regression(predictions, targets) -> dict:
    """PCC, SRCC, and RMSE of continuous predictions against targets."""
    return {
        "pcc": pearson(predictions, targets),
        "srcc": spearman(predictions, targets),
        "rmse": rmse(predictions, targets),
    }


def roc_auc(scores, labels) -> float:
    """Probability a random positive outscores a random negative (ties 0.5)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    if s.size != y.size:
        raise UndefinedMetricError(
            f"length mismatch: {s.size} scores vs {y.size} labels"
        )
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            "roc_auc needs both classes present; got "
            f"{n_pos} positives and {n_neg} negatives"
        )
    rank_sum = midranks(s)[y].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def eval_binary(scores, labels, threshold: float = 0.5) -> dict:
    """Precision/recall/F1 for class complex at the threshold, plus ROC-AUC.

    Thresholding follows the routing rule: score >= threshold predicts
    complex. With a single class present ROC-AUC is undefined and comes back
    as None; the threshold metrics are still returned.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    if s.size != y.size or s.size == 0:
        raise UndefinedMetricError(
            f"need equal nonempty lengths, got {s.size} scores and "
            f"{y.size} labels"
        )
    pred = s >= threshold
    tp = int((pred & y).sum())
    fp = int((pred & ~y).sum())
    fn = int((~pred & y).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    try:
        auc = roc_auc(s, y)
    except UndefinedMetricError:
        auc = None
    return {"precision": precision, "recall": recall, "f1": f1, "roc_auc": auc}
