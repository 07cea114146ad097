"""
Classification metrics: AUC (binary or macro one-vs-rest), macro F1 and accuracy
"""

from typing import Dict, Optional

import numpy as np
from sklearn.metrics import accuracy_score, f1_score, roc_auc_score

from services.errors import UndefinedMetricError


def auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """
    Probability that a positive outranks a negative, ties counted 0.5
    scores: (N,) positive-class scores for binary labels, or (N, K) class scores
    Multiclass averages one-vs-rest AUC over classes that have both positives and negatives
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if classes.size < 2:
        raise UndefinedMetricError(f"AUC is undefined for labels of a single class {classes.tolist()}")

    if scores.ndim == 1:
        return float(roc_auc_score(labels == classes.max(), scores))
    if scores.shape[1] == 2:
        return float(roc_auc_score(labels == 1, scores[:, 1]))
    per_class = [roc_auc_score(labels == c, scores[:, c]) for c in classes]
    return float(np.mean(per_class))


def f1(preds: np.ndarray, labels: np.ndarray, n_classes: Optional[int] = None) -> float:
    """Macro F1; a class with neither predictions nor instances scores 0"""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise UndefinedMetricError("F1 of an empty prediction set")
    classes = list(range(n_classes)) if n_classes else sorted(set(preds.tolist()) | set(labels.tolist()))
    return float(f1_score(labels, preds, labels=classes, average='macro', zero_division=0))


def accuracy(preds: np.ndarray, labels: np.ndarray) -> float:
    return float(accuracy_score(labels, preds))


def classification_report(probs: np.ndarray, labels: np.ndarray, n_classes: int) -> Dict[str, Optional[float]]:
    """auc / f1 / acc of class probabilities; auc is None when the labels hold a single class"""
    preds = np.argmax(probs, axis=1)
    try:
        auc_value = auc(probs, labels)
    except UndefinedMetricError:
        auc_value = None
    return {
        'auc': auc_value,
        'f1': f1(preds, labels, n_classes),
        'acc': accuracy(preds, labels),
    }
