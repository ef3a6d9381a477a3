"""Ranking and calibration metrics for binary scorers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as model_mod
from .data import Dataset, EncodedDataset
from .errors import MetricError


@dataclass(frozen=True)
class EvalReport:
    auc: float
    logloss: float
    n: int
    positives: int

    def to_dict(self) -> dict:
        return {
            "auc": self.auc,
            "logloss": self.logloss,
            "n": self.n,
            "positives": self.positives,
        }


def auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Probability a random positive outranks a random negative, ties 1/2.

    Computed from midranks (the Mann-Whitney statistic), O(n log n).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise MetricError(
            f"scores {scores.shape} and labels {labels.shape} must be equal-length vectors"
        )
    n = scores.size
    pos = int(labels.sum())
    neg = n - pos
    if pos == 0 or neg == 0:
        raise MetricError(
            f"AUC needs both classes, got {pos} positives of {n}"
        )
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    starts = ends - counts
    midranks = (starts + ends + 1) / 2.0  # 1-based average rank per tie group
    rank_sum_pos = float(midranks[inverse][labels == 1.0].sum())
    return (rank_sum_pos - pos * (pos + 1) / 2.0) / (pos * neg)


def evaluate(
    params: model_mod.ModelParams, dataset: Dataset | EncodedDataset
) -> EvalReport:
    """Score every instance and report AUC plus logloss."""
    enc = dataset if isinstance(dataset, EncodedDataset) else EncodedDataset(dataset)
    if enc.n == 0:
        raise MetricError("cannot evaluate an empty dataset")
    scores = model_mod.score_dataset(params, enc)
    labels = enc.labels
    return EvalReport(
        auc=auc(scores, labels),
        logloss=model_mod.logloss(scores, labels),
        n=enc.n,
        positives=int(labels.sum()),
    )
