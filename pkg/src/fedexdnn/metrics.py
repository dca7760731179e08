"""Window-level anomaly detection metrics.

Scores are oriented so that higher means more anomalous; a window is flagged
when ``score >= threshold``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        y = np.asarray(self.labels).astype(int)
        if s.shape != y.shape or s.ndim != 1:
            raise MetricError("scores and labels must be 1-d and of equal length")
        if len(s) == 0:
            raise MetricError("empty scored set")
        if not np.isin(y, (0, 1)).all():
            raise MetricError("labels must be 0 or 1")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "labels", y)

    def require_both_classes(self) -> None:
        n_pos = int(self.labels.sum())
        if n_pos == 0 or n_pos == len(self.labels):
            raise MetricError("both normal and anomalous samples are required")


@dataclass(frozen=True)
class Detection:
    f1: float
    precision: float
    recall: float
    threshold: float
    auc: float | None = None


def auc(scored: ScoredSet) -> float:
    """Probability an anomaly outscores a normal window, ties counting one half."""
    scored.require_both_classes()
    ranks = rankdata(scored.scores)  # average ranks give the half-credit for ties
    pos = scored.labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def prf_at(scored: ScoredSet, threshold: float) -> tuple[float, float, float]:
    pred = scored.scores >= threshold
    tp = int(np.sum(pred & (scored.labels == 1)))
    fp = int(np.sum(pred & (scored.labels == 0)))
    fn = int(np.sum(~pred & (scored.labels == 1)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return f1, precision, recall


def best_f1(scored: ScoredSet) -> Detection:
    """Sweep every distinct score as threshold; ties in F1 go to the higher threshold."""
    scored.require_both_classes()
    order = np.argsort(-scored.scores, kind="stable")
    s = scored.scores[order]
    y = scored.labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    # the last index of each run of equal scores is where that threshold's counts live
    last = np.r_[s[1:] != s[:-1], True]
    tp, fp, thr = tp[last], fp[last], s[last]
    n_pos = y.sum()
    precision = tp / (tp + fp)
    recall = tp / n_pos
    with np.errstate(invalid="ignore", divide="ignore"):
        f1 = np.where(tp > 0, 2 * precision * recall / (precision + recall), 0.0)
    best = int(np.argmax(f1))  # first max = highest threshold
    return Detection(float(f1[best]), float(precision[best]), float(recall[best]),
                     float(thr[best]))


def select_then_apply(val: ScoredSet, test: ScoredSet) -> Detection:
    """Pick the best-F1 threshold on ``val`` and report ``test`` metrics at it."""
    chosen = best_f1(val).threshold
    test.require_both_classes()
    f1, precision, recall = prf_at(test, chosen)
    return Detection(f1, precision, recall, chosen, auc(test))
