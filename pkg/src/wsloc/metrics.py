"""Classification metrics: top-k accuracy and confusion counts."""

from __future__ import annotations

import numpy as np


class MetricsError(Exception):
    pass


def predictions(logits: np.ndarray) -> np.ndarray:
    """Top-1 class per row; ties go to the lowest class index."""
    logits = np.asarray(logits)
    if logits.ndim != 2:
        raise MetricsError(f"expected (N, K) logits, got shape {logits.shape}")
    return logits.argmax(axis=1)


def topk_accuracy(logits: np.ndarray, labels: np.ndarray, k: int) -> float:
    """Fraction of rows whose true label is among the k largest logits.

    Ties are broken by the lowest class index (a stable sort on descending
    logit values), so results are deterministic.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise MetricsError(f"expected non-empty (N, K) logits, got shape {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise MetricsError(f"labels shape {labels.shape} mismatches logits {logits.shape}")
    if k < 1:
        raise MetricsError(f"k must be >= 1, got {k}")
    if k > logits.shape[1]:
        raise MetricsError(f"k={k} exceeds the number of classes K={logits.shape[1]}")
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    hits = (order == labels[:, None]).any(axis=1)
    return float(hits.mean())


def confusion_matrix(preds: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    """counts[i, j] = number of samples with true class i predicted as j.

    Row sums are the per-class support; the trace over the total is top-1
    accuracy.
    """
    preds = np.asarray(preds, dtype=int)
    labels = np.asarray(labels, dtype=int)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise MetricsError(f"preds {preds.shape} and labels {labels.shape} must be equal 1-d")
    if len(preds) and (preds.min() < 0 or preds.max() >= num_classes):
        raise MetricsError("prediction index out of range")
    if len(labels) and (labels.min() < 0 or labels.max() >= num_classes):
        raise MetricsError("label index out of range")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return counts
