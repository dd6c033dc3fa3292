"""Confusion matrix accumulation and the derived classification metrics.

Rows are true classes, columns are predictions. Macro averages are the
unweighted mean of the per-class scores (macro F1 averages per-class F1,
it is not the F1 of the macro precision/recall). Any 0/0 quotient is 0, so
absent classes never poison the totals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ConfusionMatrix:
    def __init__(self, num_classes):
        if num_classes < 1:
            raise ValueError("need at least one class")
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    @property
    def num_classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())

    def _check(self, label):
        if not 0 <= label < self.num_classes:
            raise ValueError(f"label {label} out of range [0, {self.num_classes})")

    def update(self, true_label, predicted_label):
        self._check(true_label)
        self._check(predicted_label)
        self.counts[true_label, predicted_label] += 1

    def update_batch(self, true_labels, predicted_labels):
        t = np.asarray(true_labels)
        p = np.asarray(predicted_labels)
        if t.size:
            self._check(int(t.min()))
            self._check(int(t.max()))
            self._check(int(p.min()))
            self._check(int(p.max()))
        np.add.at(self.counts, (t, p), 1)

    def merge(self, other: "ConfusionMatrix"):
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices of different sizes")
        self.counts += other.counts
        return self

    @classmethod
    def from_pairs(cls, true_labels, predicted_labels, num_classes):
        cm = cls(num_classes)
        cm.update_batch(true_labels, predicted_labels)
        return cm


@dataclass
class MetricsSummary:
    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_f1: float

    def to_dict(self):
        return {
            "accuracy": self.accuracy,
            "precision": self.precision.tolist(),
            "recall": self.recall.tolist(),
            "f1": self.f1.tolist(),
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
        }


def _safe_div(num, den):
    out = np.zeros_like(num, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def summarize(cm: ConfusionMatrix) -> MetricsSummary:
    total = cm.total
    if total < 1:
        raise ValueError("cannot summarize an empty confusion matrix")
    counts = cm.counts.astype(np.float64)
    diag = np.diag(counts)
    precision = _safe_div(diag, counts.sum(axis=0))
    recall = _safe_div(diag, counts.sum(axis=1))
    f1 = _safe_div(2.0 * precision * recall, precision + recall)
    return MetricsSummary(
        accuracy=float(diag.sum() / total),
        precision=precision, recall=recall, f1=f1,
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
    )


def confusion_csv(cm: ConfusionMatrix, labels) -> str:
    """Render the matrix with label strings as header row and column."""
    if len(labels) != cm.num_classes:
        raise ValueError("label count does not match matrix size")
    lines = ["true\\predicted," + ",".join(labels)]
    for i, name in enumerate(labels):
        lines.append(name + "," + ",".join(str(int(v)) for v in cm.counts[i]))
    return "\n".join(lines) + "\n"
