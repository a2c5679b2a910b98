"""Threshold-free ranking metrics and accuracy, written out directly so they
have no hidden tie-handling or interpolation conventions."""
from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


class UndefinedMetricError(ValueError):
    pass


def _binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-D and equally long")
    if labels.all() or not labels.any():
        raise UndefinedMetricError("AUC/AP need both positive and negative labels")
    return scores, labels


def auc(scores, labels) -> float:
    """ROC AUC via the Mann-Whitney rank statistic, ties given average rank.

    ``labels`` are 1 for fake (positive), 0 for real.
    """
    scores, labels = _binary(scores, labels)
    ranks = rankdata(scores)
    n_pos = labels.sum()
    n_neg = labels.size - n_pos
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def ap(scores, labels) -> float:
    """Average precision: step-wise area under the precision-recall curve.

    Samples with tied scores enter the curve together as one threshold.
    """
    scores, labels = _binary(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]   # end of each tie group
    precision = tp[last] / (tp[last] + fp[last])
    recall = tp[last] / y.sum()
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def acc(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape or predictions.size == 0:
        raise ValueError("predictions and labels must be non-empty and equally long")
    return float(np.mean(predictions == labels))
