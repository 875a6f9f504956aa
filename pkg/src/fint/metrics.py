"""AUC (rank/Mann-Whitney form) and logloss."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .optim import bce_loss, check_labels


class UndefinedAUC(ValueError):
    """AUC needs at least one positive and one negative example."""


def average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    x = np.asarray(x)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    boundaries = np.flatnonzero(np.diff(xs)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [len(xs)]))
    ranks_sorted = np.repeat((starts + ends + 1) / 2.0, ends - starts)
    ranks = np.empty(len(x), dtype=np.float64)
    ranks[order] = ranks_sorted
    return ranks


def auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative, ties counting 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    y = check_labels(labels)
    if scores.shape != y.shape:
        raise ValueError(f"scores {scores.shape} vs labels {y.shape}")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUC(f"undefined AUC: {n_pos} positives, {n_neg} negatives")
    # twice the U statistic is an integer, so the division below is exactly rounded
    two_u = 2.0 * average_ranks(scores)[y == 1].sum() - n_pos * (n_pos + 1)
    return float(two_u / (2.0 * n_pos * n_neg))


def logloss(scores, labels) -> float:
    return bce_loss(scores, labels)[0]


@dataclass
class MetricsReport:
    auc: float
    logloss: float
    positives: int
    negatives: int
    rows: int

    def to_dict(self) -> dict:
        return asdict(self)

    def cli_dict(self) -> dict:
        return {"auc": self.auc, "logloss": self.logloss, "rows": self.rows, "positives": self.positives}


def evaluate_scores(scores, labels) -> MetricsReport:
    y = check_labels(labels)
    pos = int(y.sum())
    return MetricsReport(auc(scores, y), logloss(scores, y), pos, len(y) - pos, len(y))
