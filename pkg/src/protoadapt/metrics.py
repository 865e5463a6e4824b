"""Point-level evaluation: accuracy, per-class IoU, pseudo-label quality."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import HiddenLabels
from .denoise import IGNORE
from .errors import DimensionError


@dataclass
class EvalReport:
    per_class_iou: np.ndarray
    miou: float
    accuracy: float
    pseudo_accuracy: float = float("nan")
    pseudo_miou: float = float("nan")
    proto_drift: float = float("nan")


def reveal(hidden: HiddenLabels) -> np.ndarray:
    """Unwrap evaluation-only ground truth.  Only metrics code calls this."""
    if not isinstance(hidden, HiddenLabels):
        raise TypeError("reveal() expects HiddenLabels")
    return hidden._values


def confusion_matrix(pred, true, class_count: int) -> np.ndarray:
    """Counts[t, p] over rows where both labels are valid (IGNORE excluded)."""
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape:
        raise DimensionError("prediction and truth lengths differ")
    if ((pred >= class_count) | ((pred < 0) & (pred != IGNORE))).any():
        raise DimensionError("predictions must lie in [0, K) or be IGNORE")
    if ((true >= class_count) | ((true < 0) & (true != IGNORE))).any():
        raise DimensionError("ground truth must lie in [0, K) or be IGNORE")
    keep = (pred != IGNORE) & (true != IGNORE)
    idx = true[keep] * class_count + pred[keep]
    counts = np.bincount(idx.astype(np.int64), minlength=class_count * class_count)
    return counts.reshape(class_count, class_count)


def confusion_and_iou(pred, true, class_count: int):
    """Per-class IoU, the mean over classes present in the truth, and accuracy.

    IoU_k = TP / (TP + FP + FN); classes with no ground-truth samples are
    excluded from the mean (their IoU reports as nan).
    """
    cm = confusion_matrix(pred, true, class_count)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = tp + fp + fn
    iou = np.where(denom > 0, tp / np.maximum(denom, 1), np.nan)
    present = cm.sum(axis=1) > 0
    iou[~present] = np.nan
    miou = float(np.nanmean(iou[present])) if present.any() else float("nan")
    total = cm.sum()
    accuracy = float(tp.sum() / total) if total else float("nan")
    return iou, miou, accuracy


def accuracy_score(pred, true) -> float:
    pred = np.asarray(pred)
    true = np.asarray(true)
    keep = (pred != IGNORE) & (true != IGNORE)
    if not keep.any():
        return float("nan")
    return float((pred[keep] == true[keep]).mean())


def prototype_drift(bank_centroids, seen, features, true_labels) -> float:
    """Mean distance from each seen prototype to its true class centroid."""
    features = np.asarray(features, dtype=np.float64)
    true_labels = np.asarray(true_labels)
    dists = []
    for k in range(bank_centroids.shape[0]):
        members = features[true_labels == k]
        if not seen[k] or members.shape[0] == 0:
            continue
        dists.append(np.linalg.norm(bank_centroids[k] - members.mean(axis=0)))
    return float(np.mean(dists)) if dists else float("nan")


def evaluate(pred, hidden: HiddenLabels, class_count: int, pseudo=None,
             proto_drift_value: float = float("nan")) -> EvalReport:
    """Full report against hidden ground truth."""
    true = reveal(hidden)
    iou, miou, acc = confusion_and_iou(pred, true, class_count)
    report = EvalReport(iou, miou, acc, proto_drift=proto_drift_value)
    if pseudo is not None:
        _, p_miou, p_acc = confusion_and_iou(pseudo, true, class_count)
        report.pseudo_accuracy = p_acc
        report.pseudo_miou = p_miou
    return report
