"""Ranking objectives over per-episode anomaly scores.

``empirical_auc`` is the evaluation metric: the fraction of
(anomalous, normal) query pairs whose scores are strictly ordered the
right way. ``smoothed_auc`` replaces the indicator with a sigmoid of the
score difference so the episode loss (its negation) is differentiable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, mean_all, neg, sigmoid, sigmoid_values, sub, transpose
from .errors import EmptyClass


@dataclass
class EpisodeScore:
    """Anomaly scores for one scored query set, split by true label."""

    anomaly_scores: np.ndarray
    normal_scores: np.ndarray

    def __post_init__(self):
        self.anomaly_scores = np.asarray(self.anomaly_scores, dtype=np.float64).ravel()
        self.normal_scores = np.asarray(self.normal_scores, dtype=np.float64).ravel()

    def _require_both_classes(self):
        if self.anomaly_scores.size == 0 or self.normal_scores.size == 0:
            raise EmptyClass("AUC needs at least one anomalous and one normal score")


def empirical_auc(scores: EpisodeScore, ties_half: bool = False) -> float:
    """Fraction of (anomaly, normal) pairs with a strictly higher anomaly score.

    Ties count zero by default. ``ties_half`` scores ties as 1/2 instead,
    matching the convention of common evaluation libraries; it is meant
    for external comparison only and never enters training.
    """
    scores._require_both_classes()
    a = scores.anomaly_scores[:, None]
    n = scores.normal_scores[None, :]
    wins = (a > n).sum()
    if ties_half:
        wins = wins + 0.5 * (a == n).sum()
    return float(wins) / (a.size * n.shape[1])


def smoothed_auc(scores: EpisodeScore) -> float:
    """Mean sigmoid of pairwise score differences.

    Computed as ``0.5 + mean(sigmoid(diff) - 0.5)`` with an exactly-rounded
    sum: the mirrored sigmoid makes the swapped-class call see the exact
    negation of every term, so the two results add to 1.0 in floating
    point, mirroring the sigmoid identity.
    """
    scores._require_both_classes()
    diff = scores.anomaly_scores[:, None] - scores.normal_scores[None, :]
    centered = sigmoid_values(diff) - 0.5
    return 0.5 + math.fsum(centered.ravel()) / diff.size


def smoothed_auc_node(anomaly_scores: Tensor, normal_scores: Tensor) -> Tensor:
    """Tape version of ``smoothed_auc`` over (n, 1) score columns."""
    if anomaly_scores.value.size == 0 or normal_scores.value.size == 0:
        raise EmptyClass("AUC needs at least one anomalous and one normal score")
    diff = sub(anomaly_scores, transpose(normal_scores))
    return mean_all(sigmoid(diff))


def episode_loss(anomaly_scores: Tensor, normal_scores: Tensor) -> Tensor:
    """Negated smoothed AUC; gradients flow to the scores."""
    return neg(smoothed_auc_node(anomaly_scores, normal_scores))
