from dataclasses import dataclass

import numpy as np

from .data import DataFormatError
from .taxonomy import EMOTIONS, N_CLASSES, label_to_index


@dataclass
class MetricsReport:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    confusion: np.ndarray  # rows = truth, columns = prediction
    macro_f1: float
    weighted_f1: float
    accuracy: float

    @property
    def micro_f1(self):
        # single-label multiclass: micro F1 == accuracy
        return self.accuracy

    @property
    def n(self):
        return int(self.confusion.sum())

    def to_dict(self):
        return {
            "n": self.n,
            "accuracy": self.accuracy,
            "micro_f1": self.micro_f1,
            "macro_f1": self.macro_f1,
            "weighted_f1": self.weighted_f1,
            "per_class": {
                name: {"precision": float(self.precision[k]), "recall": float(self.recall[k]),
                       "f1": float(self.f1[k]), "support": int(self.support[k])}
                for k, name in enumerate(EMOTIONS)
            },
            "confusion": self.confusion.tolist(),
        }

    def to_text(self):
        lines = [f"{'class':<10} {'prec':>7} {'rec':>7} {'f1':>7} {'support':>8}"]
        for k, name in enumerate(EMOTIONS):
            lines.append(f"{name:<10} {self.precision[k]:7.4f} {self.recall[k]:7.4f} "
                         f"{self.f1[k]:7.4f} {int(self.support[k]):8d}")
        lines.append(f"accuracy/micro-F1 {self.accuracy:.4f}  macro-F1 {self.macro_f1:.4f}  "
                     f"weighted-F1 {self.weighted_f1:.4f}  n={self.n}")
        lines.append("confusion (rows=truth, cols=pred): " + " ".join(a[:3] for a in EMOTIONS))
        for k, name in enumerate(EMOTIONS):
            lines.append(f"  {name[:3]} " + " ".join(f"{v:5d}" for v in self.confusion[k]))
        return "\n".join(lines)


def _safe_div(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.divide(a, b, out=np.zeros_like(a), where=b > 0)


def confusion_matrix(y_true, y_pred, n_classes=N_CLASSES):
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


def compute_metrics(y_pred, y_true):
    """Classification report from integer label arrays (0/0 ratios count as 0)."""
    y_pred = np.asarray(y_pred, dtype=np.int64)
    y_true = np.asarray(y_true, dtype=np.int64)
    if y_pred.shape != y_true.shape:
        raise ValueError(f"prediction/truth length mismatch: {y_pred.shape} vs {y_true.shape}")
    cm = confusion_matrix(y_true, y_pred)
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    precision = _safe_div(tp, predicted)
    recall = _safe_div(tp, support)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    n = int(support.sum())
    weighted = float((f1 * support).sum() / n) if n else 0.0
    accuracy = float(tp.sum() / n) if n else 0.0
    return MetricsReport(precision, recall, f1, support, cm, float(f1.mean()), weighted, accuracy)


def evaluate(predictions, truth):
    """Metrics for a PredictionSet against a mapping id -> label name (or index)."""
    if set(predictions.ids) != set(truth):
        only_p = sorted(set(predictions.ids) - set(truth))[:3]
        only_t = sorted(set(truth) - set(predictions.ids))[:3]
        raise DataFormatError(f"id sets differ: only in predictions {only_p}, only in truth {only_t}")
    y_true = [truth[sid] if isinstance(truth[sid], (int, np.integer)) else label_to_index(truth[sid])
              for sid in predictions.ids]
    return compute_metrics(predictions.labels, y_true)
