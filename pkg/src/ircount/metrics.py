"""Classification and count-error metrics plus weighted fold aggregation."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np


def confusion_matrix(labels, preds, k: int = 4) -> np.ndarray:
    """K x K counts; rows are ground truth, columns are predictions."""
    labels = np.asarray(labels, dtype=int)
    preds = np.asarray(preds, dtype=int)
    if labels.shape != preds.shape:
        raise ValueError("labels and predictions must have equal length")
    if len(labels) == 0:
        raise ValueError("empty input")
    cm = np.zeros((k, k), dtype=int)
    np.add.at(cm, (labels, preds), 1)
    return cm


def accuracy(cm: np.ndarray) -> float:
    return float(np.trace(cm) / cm.sum())


def balanced_accuracy(cm: np.ndarray) -> float:
    """Mean per-class recall over classes that appear in the ground truth.

    Classes with zero support are excluded from the average (some test
    sessions have no 3-person frames at all).
    """
    support = cm.sum(axis=1)
    present = support > 0
    if not present.any():
        raise ValueError("confusion matrix has no samples")
    recall = cm.diagonal()[present] / support[present]
    return float(recall.mean())


def weighted_f1(cm: np.ndarray) -> float:
    """Support-weighted mean of per-class F1; empty classes contribute 0."""
    n = cm.sum()
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    tp = cm.diagonal()
    score = 0.0
    for c in range(cm.shape[0]):
        denom = support[c] + predicted[c]
        f1 = 2 * tp[c] / denom if denom > 0 else 0.0  # 2pr/(p+r) = 2tp/(sup+pred)
        score += support[c] / n * f1
    return float(score)


def mae_mse(preds, labels) -> tuple[float, float]:
    preds = np.asarray(preds, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if preds.shape != labels.shape:
        raise ValueError("length mismatch")
    if len(preds) == 0:
        raise ValueError("empty input")
    diff = preds - labels
    return float(np.abs(diff).mean()), float((diff**2).mean())


@dataclass
class FoldMetrics:
    bal_acc: float
    acc: float
    f1_weighted: float
    mae: float
    mse: float
    n_test: int

    def as_dict(self):
        return asdict(self)


def evaluate(preds, labels, k: int = 4) -> FoldMetrics:
    """All reported metrics from one pass over the predictions."""
    cm = confusion_matrix(labels, preds, k)
    mae, mse = mae_mse(preds, labels)
    return FoldMetrics(
        bal_acc=balanced_accuracy(cm),
        acc=accuracy(cm),
        f1_weighted=weighted_f1(cm),
        mae=mae,
        mse=mse,
        n_test=len(labels),
    )


def aggregate_folds(values, weights) -> tuple[float, float]:
    """Weighted mean and (population) weighted std across folds.

    Weights are the per-fold test-sample counts.
    """
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if len(values) == 0 or weights.sum() <= 0:
        raise ValueError("aggregation needs at least one positively weighted fold")
    mean = float(np.average(values, weights=weights))
    var = float(np.average((values - mean) ** 2, weights=weights))
    return mean, float(np.sqrt(var))
