"""Accuracy and rank-based ROC AUC."""

import numpy as np
from scipy.stats import rankdata

from .errors import ContractViolation


def accuracy(predicted, labels):
    predicted = np.asarray(predicted)
    labels = np.asarray(labels)
    if predicted.shape != labels.shape or labels.size == 0:
        raise ContractViolation("predictions and labels must be non-empty and aligned")
    return float(np.mean(predicted == labels))


def compute_auc(scores, labels):
    """Area under the ROC curve as the normalised Mann-Whitney U statistic.

    Tied scores count one half, which is what mid-ranks give.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ContractViolation("scores and labels must be aligned")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractViolation("AUC is undefined unless both classes are present")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))
