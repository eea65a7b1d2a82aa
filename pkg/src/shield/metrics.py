"""Evaluation metrics computed from first principles.

The AUC uses the rank formulation of the pairwise comparison count, which
credits ties a half point and therefore agrees exactly with the brute-force
definition over all (positive, negative) pairs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError, UndefinedMetricError

__all__ = ["ClassScores", "Metrics", "auc", "macro_f1", "accuracy", "compute_metrics"]


@dataclass
class ClassScores:
    precision: float
    recall: float
    f1: float


@dataclass
class Metrics:
    auc: float
    accuracy: float
    macro_f1: float
    per_class: dict[int, ClassScores]
    n: int

    def to_dict(self) -> dict:
        return {
            "auc": self.auc,
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "per_class": {
                str(c): {"precision": s.precision, "recall": s.recall, "f1": s.f1}
                for c, s in sorted(self.per_class.items())
            },
            "n": self.n,
        }


def _check_labels(labels: np.ndarray) -> None:
    if labels.size == 0:
        raise ShapeError("no samples")
    bad = set(np.unique(labels)) - {0, 1}
    if bad:
        raise DomainError(f"labels must be 0 or 1, got {sorted(bad)}")


def auc(labels, scores) -> float:
    """Area under the ROC curve, Mann-Whitney style.

    Equals the fraction of (positive, negative) pairs the scores order
    correctly, ties counting one half.  Undefined when only one class is
    present.
    """
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    _check_labels(labels)
    if labels.shape != scores.shape:
        raise ShapeError(f"labels shape {labels.shape} != scores shape {scores.shape}")
    n_pos = int(np.sum(labels == 1))
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes present")

    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(labels.size, dtype=np.float64)
    i = 0
    while i < labels.size:
        j = i
        while j + 1 < labels.size and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0  # average rank, 1-based
        i = j + 1
    pos_rank_sum = float(np.sum(ranks[labels == 1]))
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def accuracy(labels, predictions) -> float:
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    _check_labels(labels)
    if labels.shape != predictions.shape:
        raise ShapeError(f"labels shape {labels.shape} != predictions shape {predictions.shape}")
    return float(np.mean(labels == predictions))


def macro_f1(labels, predictions) -> tuple[float, dict[int, ClassScores]]:
    """Unweighted mean of the per-class F1 scores over classes {0, 1}.

    A class with no true and no predicted members contributes an F1 of zero,
    as does any other zero denominator.
    """
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    _check_labels(labels)
    if set(np.unique(predictions)) - {0, 1}:
        raise DomainError("predictions must be 0 or 1")
    if labels.shape != predictions.shape:
        raise ShapeError(f"labels shape {labels.shape} != predictions shape {predictions.shape}")
    per_class: dict[int, ClassScores] = {}
    for cls in (0, 1):
        tp = int(np.sum((predictions == cls) & (labels == cls)))
        fp = int(np.sum((predictions == cls) & (labels != cls)))
        fn = int(np.sum((predictions != cls) & (labels == cls)))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2.0 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_class[cls] = ClassScores(precision, recall, f1)
    macro = (per_class[0].f1 + per_class[1].f1) / 2.0
    return macro, per_class


def compute_metrics(labels, scores, predictions) -> Metrics:
    """Bundle AUC (from scores), accuracy and macro-F1 (from predictions)."""
    labels = np.asarray(labels)
    macro, per_class = macro_f1(labels, predictions)
    return Metrics(
        auc=auc(labels, scores),
        accuracy=accuracy(labels, predictions),
        macro_f1=macro,
        per_class=per_class,
        n=int(labels.size),
    )
