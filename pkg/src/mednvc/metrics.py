"""Confusion counts, accuracy, ROC/AUC and the evaluation report."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        for name in ("tp", "tn", "fp", "fn"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @classmethod
    def from_predictions(cls, predicted, labels) -> "ConfusionCounts":
        predicted = np.asarray(predicted).astype(int)
        labels = _binary_labels(labels)
        if predicted.shape != labels.shape:
            raise ValueError(f"{predicted.shape[0]} predictions for {labels.shape[0]} labels")
        return cls(tp=int(np.sum((predicted == 1) & (labels == 1))),
                   tn=int(np.sum((predicted == 0) & (labels == 0))),
                   fp=int(np.sum((predicted == 1) & (labels == 0))),
                   fn=int(np.sum((predicted == 0) & (labels == 1))))


def _binary_labels(labels) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be a 1-D sequence of 0/1 values")
    return labels.astype(int)


def accuracy(c: ConfusionCounts) -> float:
    """(TP + TN) / (TP + TN + FP + FN)."""
    if c.total == 0:
        raise ValueError("accuracy of an empty evaluation is undefined")
    return (c.tp + c.tn) / c.total


@dataclass(frozen=True)
class RocCurve:
    thresholds: np.ndarray  # descending; point k uses "score >= thresholds[k-1]"
    fpr: np.ndarray
    tpr: np.ndarray


def roc_curve(scores, labels) -> RocCurve:
    """ROC over every distinct score; equal scores form one threshold step."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = _binary_labels(labels)
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.shape[0]} scores for {labels.shape[0]} labels")
    pos = int(labels.sum())
    neg = len(labels) - pos
    if pos == 0 or neg == 0:
        raise ValueError("ROC/AUC needs both classes present")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    # last index of each group of equal scores
    ends = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tps = np.cumsum(y)[ends]
    fps = (ends + 1) - tps
    tpr = np.r_[0.0, tps / pos]
    fpr = np.r_[0.0, fps / neg]
    return RocCurve(s[ends], fpr, tpr)


def auc(scores, labels) -> float:
    """Trapezoidal area under the ROC curve."""
    c = roc_curve(scores, labels)
    return float(np.trapezoid(c.tpr, c.fpr)) if hasattr(np, "trapezoid") else float(np.trapz(c.tpr, c.fpr))


def softmax_scores(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def report(logits: np.ndarray, labels) -> dict:
    """Metrics from raw logits (``N x 2``): class-1 softmax score for AUC, argmax for ACC."""
    labels = _binary_labels(labels)
    logits = np.asarray(logits)
    if logits.ndim != 2 or logits.shape[0] != len(labels):
        raise ValueError(f"logits {logits.shape} do not match {len(labels)} labels")
    scores = softmax_scores(logits)[:, 1]
    counts = ConfusionCounts.from_predictions(np.argmax(logits, axis=1), labels)
    try:
        area: Optional[float] = auc(scores, labels)
    except ValueError:
        area = None
    return {"acc": accuracy(counts), "auc": area, "tp": counts.tp, "tn": counts.tn, "fp": counts.fp,
            "fn": counts.fn, "n": counts.total, "scores": scores}


def evaluate(forward: Callable[..., "object"], images: np.ndarray, records: np.ndarray, labels: Sequence[int],
             batch_size: int = 16) -> dict:
    """Run ``forward(images, records)`` batchwise without gradients and build the report.

    Samples are evaluated independently, so the report does not depend on
    sample order. No modality dropout happens here.
    """
    from .diffcore import no_grad

    n = len(images)
    if n == 0:
        raise ValueError("cannot evaluate an empty set")
    chunks = []
    with no_grad():
        for start in range(0, n, batch_size):
            out = forward(images[start:start + batch_size], records[start:start + batch_size])
            chunks.append(np.asarray(getattr(out, "data", out)))
    return report(np.concatenate(chunks), labels)
