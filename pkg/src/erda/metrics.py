"""Segmentation metrics: confusion matrix, per-class IoU, mIoU, OA."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .losses import entropy


@dataclass
class MetricsReport:
    per_class_iou: np.ndarray  # NaN where a class has zero union
    miou: float
    oa: float
    mean_pseudo_entropy: float | None = None

    def to_dict(self):
        return {
            "miou": self.miou,
            "oa": self.oa,
            "per_class_iou": [None if np.isnan(v) else float(v) for v in self.per_class_iou],
            "mean_pseudo_entropy": self.mean_pseudo_entropy,
        }


def new_confusion(K):
    return np.zeros((K, K), dtype=np.int64)


def confusion_update(cm, gt, pred):
    """Count one (ground truth, prediction) pair; rows are ground truth."""
    K = cm.shape[0]
    if not (0 <= gt < K and 0 <= pred < K):
        raise ValueError(f"class ids must be in [0, {K}), got gt={gt} pred={pred}")
    cm[gt, pred] += 1
    return cm


def confusion_matrix(gt, pred, K):
    gt = np.asarray(gt, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if gt.shape != pred.shape:
        raise ValueError("gt and pred must have the same length")
    if gt.size and (min(gt.min(), pred.min()) < 0 or max(gt.max(), pred.max()) >= K):
        raise ValueError(f"class ids must be in [0, {K})")
    return kernels.confusion(gt, pred, K)


def metrics(cm, mean_pseudo_entropy=None) -> MetricsReport:
    cm = np.asarray(cm)
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    valid = union > 0
    miou = float(iou[valid].mean()) if valid.any() else 0.0
    total = cm.sum()
    oa = float(tp.sum() / total) if total else 0.0
    return MetricsReport(iou, miou, oa, mean_pseudo_entropy)


def mean_pseudo_entropy(pseudo):
    """Average Shannon entropy (nats) over a set of pseudo-label rows."""
    pseudo = np.asarray(pseudo, dtype=np.float64)
    if pseudo.ndim != 2 or len(pseudo) == 0:
        raise ValueError("need a non-empty N x K array of pseudo-labels")
    return float(np.mean(entropy(pseudo)))
