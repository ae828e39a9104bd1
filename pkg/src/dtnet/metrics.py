"""Segmentation metrics: pixel accuracy, mean IoU, ROC/AUC, and the CSV row format."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .errors import DataError, DimensionError, UndefinedMetricError

CSV_FIELDS = ("run_id", "step", "loss", "accuracy", "mean_iou", "auc")


def _same_shape(pred, truth):
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise DimensionError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    return pred, truth


def pixel_accuracy(pred, truth) -> float:
    pred, truth = _same_shape(pred, truth)
    return float(np.mean(pred == truth))


def confusion_matrix(pred, truth, n_classes: int) -> np.ndarray:
    """(truth, pred) counts; rows are true classes."""
    pred, truth = _same_shape(pred, truth)
    for name, ids in (("pred", pred), ("truth", truth)):
        if ids.size and (ids.min() < 0 or ids.max() >= n_classes):
            raise DataError(f"{name} contains class ids outside [0, {n_classes})")
    idx = truth.astype(np.int64).ravel() * n_classes + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def iou_from_confusion(conf: np.ndarray) -> float:
    """Mean IoU over classes present in truth or prediction."""
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - inter
    present = union > 0
    if not present.any():
        raise UndefinedMetricError("no classes present")
    return float(np.mean(inter[present] / union[present]))


def mean_iou(pred, truth, n_classes: int) -> float:
    return iou_from_confusion(confusion_matrix(pred, truth, n_classes))


def roc_curve(scores, truth):
    """ROC points (fpr, tpr) from a threshold sweep over the unique scores.

    Tied scores enter the curve together, giving a diagonal segment.
    """
    scores, truth = _same_shape(scores, truth)
    s = scores.ravel().astype(np.float64)
    t = truth.ravel().astype(bool)
    n_pos = int(t.sum())
    n_neg = t.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC/AUC needs both positive and negative pixels")
    order = np.argsort(-s, kind="mergesort")
    s, t = s[order], t[order]
    last_of_group = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(t)[last_of_group]
    fp = np.cumsum(~t)[last_of_group]
    fpr = np.r_[0.0, fp / n_neg]
    tpr = np.r_[0.0, tp / n_pos]
    return fpr, tpr


def roc_auc(scores, truth):
    """Return ``((fpr, tpr), auc)`` with the AUC by the trapezoid rule."""
    fpr, tpr = roc_curve(scores, truth)
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return (fpr, tpr), auc


class MetricsWriter:
    """Appends rows of :data:`CSV_FIELDS` to a CSV file."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = open(self.path, "w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(CSV_FIELDS)

    def write(self, run_id: str, step: int, loss: float, accuracy: float, mean_iou: float, auc: float):
        self._writer.writerow([run_id, step, f"{loss:.10g}", f"{accuracy:.10g}", f"{mean_iou:.10g}", _fmt(auc)])
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _fmt(x: float) -> str:
    return "nan" if x != x else f"{x:.10g}"


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
