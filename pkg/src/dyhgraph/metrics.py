"""Ranking metrics for binary classifiers: average precision and ROC AUC.

Both metrics are rank statistics over the score vector.  Average precision
walks the precision-recall curve threshold by threshold with tied scores
grouped into one step; AUC is the probability that a random positive outscores
a random negative, ties counting one half, computed from average ranks.
"""

from __future__ import annotations

import numpy as np

from .errors import MetricError
from .validation import as_label_vector

__all__ = ["average_precision", "roc_auc"]


def _checked_scores(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = as_label_vector(labels, n=s.shape[0], name="labels")
    if not np.all((y == 0) | (y == 1)):
        raise MetricError("labels must be 0/1")
    if not np.all(np.isfinite(s)):
        raise MetricError("scores contain non-finite values")
    return s, y


def average_precision(scores, labels) -> float:
    """Area under the precision-recall curve, one step per distinct score."""
    s, y = _checked_scores(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricError("average precision is undefined without positives")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # cumulative counts at the end of each tie group
    boundaries = np.nonzero(np.diff(s))[0]
    last = np.concatenate([boundaries, [len(s) - 1]])
    tp = np.cumsum(y)[last]
    seen = last + 1.0
    precision = tp / seen
    recall = tp / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(((recall - prev_recall) * precision).sum())


def roc_auc(scores, labels) -> float:
    """Rank-based AUC: P(score+ > score-) with ties counting one half."""
    s, y = _checked_scores(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC is undefined unless both classes are present")
    order = np.argsort(s, kind="stable")
    ranks = np.empty(len(s))
    ranks[order] = np.arange(1, len(s) + 1)
    # average the ranks inside each tie group
    sorted_scores = s[order]
    group_start = np.concatenate([[0], np.nonzero(np.diff(sorted_scores))[0] + 1])
    group_end = np.concatenate([group_start[1:], [len(s)]])
    for a, b in zip(group_start, group_end):
        if b - a > 1:
            ranks[order[a:b]] = 0.5 * (a + 1 + b)
    pos_rank_sum = ranks[y == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
