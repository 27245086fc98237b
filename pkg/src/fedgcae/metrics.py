"""Classification metrics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import ACTIVITIES, NUM_CLASSES


@dataclass
class MetricsReport:
    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    confusion: np.ndarray
    per_user_accuracy: dict[int, float] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    @property
    def mean_user_accuracy(self) -> float:
        if not self.per_user_accuracy:
            return self.accuracy
        return float(np.mean(list(self.per_user_accuracy.values())))

    def per_class_rows(self, names=ACTIVITIES):
        for c in range(len(self.precision)):
            name = names[c] if c < len(names) else str(c)
            yield name, float(self.precision[c]), float(self.recall[c]), float(self.f1[c])

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "mean_user_accuracy": self.mean_user_accuracy,
            "precision": self.precision.tolist(),
            "recall": self.recall.tolist(),
            "f1": self.f1.tolist(),
            "confusion": self.confusion.tolist(),
            "per_user_accuracy": {str(k): v for k, v in self.per_user_accuracy.items()},
        }


def confusion_matrix(predictions, labels, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    p = np.asarray(predictions, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y, p), 1)
    return cm


def compute_metrics(predictions, labels, user_ids=None, num_classes: int = NUM_CLASSES) -> MetricsReport:
    p = np.asarray(predictions, dtype=np.int64).reshape(-1)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if p.shape != y.shape:
        raise ValueError(f"{p.size} predictions but {y.size} labels")
    if y.size == 0:
        raise ValueError("cannot score an empty test set")
    cm = confusion_matrix(p, y, num_classes)
    tp = np.diag(cm).astype(np.float64)
    pred_tot = cm.sum(axis=0)
    true_tot = cm.sum(axis=1)
    # 0 where the denominator vanishes
    precision = np.divide(tp, pred_tot, out=np.zeros(num_classes), where=pred_tot > 0)
    recall = np.divide(tp, true_tot, out=np.zeros(num_classes), where=true_tot > 0)
    s = precision + recall
    f1 = np.divide(2 * precision * recall, s, out=np.zeros(num_classes), where=s > 0)
    per_user = {}
    if user_ids is not None:
        u = np.asarray(user_ids).reshape(-1)
        if u.shape != y.shape:
            raise ValueError("user_ids must align with labels")
        for uid in np.unique(u):
            m = u == uid
            per_user[int(uid)] = float(np.mean(p[m] == y[m]))
    return MetricsReport(float(tp.sum() / y.size), precision, recall, f1, cm, per_user)


def mean_std(values) -> tuple[float, float]:
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0
