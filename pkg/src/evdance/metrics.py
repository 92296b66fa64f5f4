"""Accuracy, macro recall and macro F1 from a confusion matrix.

Classes with no true samples are left out of the macro means.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import EmptyMatrix, LabelOutOfRange, ShapeMismatch


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # (K, K), rows = true class, cols = predicted

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(true_labels, predicted_labels, k: int) -> ConfusionMatrix:
    y = np.asarray(true_labels, dtype=np.int64).reshape(-1)
    yhat = np.asarray(predicted_labels, dtype=np.int64).reshape(-1)
    if y.shape != yhat.shape:
        raise ShapeMismatch(f"{len(y)} labels vs {len(yhat)} predictions")
    if len(y) and (min(y.min(), yhat.min()) < 0 or max(y.max(), yhat.max()) >= k):
        raise LabelOutOfRange(f"labels must lie in [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (y, yhat), 1)
    return ConfusionMatrix(counts)


def _nonempty(cm: ConfusionMatrix) -> np.ndarray:
    if cm.total == 0:
        raise EmptyMatrix("no samples in confusion matrix")
    return cm.counts.astype(np.float64)


def accuracy(cm: ConfusionMatrix) -> float:
    c = _nonempty(cm)
    return float(np.trace(c) / c.sum())


def per_class(cm: ConfusionMatrix) -> dict[str, np.ndarray]:
    c = _nonempty(cm)
    tp = np.diag(c)
    support = c.sum(axis=1)
    predicted = c.sum(axis=0)
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return {"precision": precision, "recall": recall, "f1": f1, "support": support}


def macro_recall(cm: ConfusionMatrix) -> float:
    pc = per_class(cm)
    return float(pc["recall"][pc["support"] > 0].mean())


def macro_f1(cm: ConfusionMatrix) -> float:
    pc = per_class(cm)
    return float(pc["f1"][pc["support"] > 0].mean())


@dataclass
class MetricsReport:
    accuracy: float
    macro_recall: float
    macro_f1: float
    per_class: dict
    n: int

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "macro_recall": self.macro_recall,
                "macro_f1": self.macro_f1, "per_class": self.per_class, "n": self.n}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def metrics_report(true_labels, predicted_labels, k: int) -> MetricsReport:
    cm = confusion(true_labels, predicted_labels, k)
    pc = per_class(cm)
    included = pc["support"] > 0
    detail = {
        str(c): {"precision": float(pc["precision"][c]), "recall": float(pc["recall"][c]),
                 "f1": float(pc["f1"][c]), "support": int(pc["support"][c]),
                 "in_macro": bool(included[c])}
        for c in range(cm.k)
    }
    return MetricsReport(accuracy(cm), macro_recall(cm), macro_f1(cm), detail, cm.total)
