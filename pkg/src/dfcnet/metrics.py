"""Confusion-matrix bookkeeping and mean intersection-over-union."""
import numpy as np


class ConfusionMatrix:
    """K x K counts; rows are ground truth, columns are predictions."""

    def __init__(self, num_classes):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    @property
    def total(self):
        return int(self.counts.sum())

    def update(self, pred, target, ignore_index=None):
        confusion_update(self, pred, target, ignore_index)
        return self

    def merge(self, other):
        self.counts += other.counts
        return self

    def iou(self):
        return per_class_iou(self.counts)

    def miou(self, classes=None):
        return miou(self, classes)

    def pixel_accuracy(self):
        total = self.counts.sum()
        return float(np.trace(self.counts)) / total if total else float("nan")


def confusion_update(cm, pred, target, ignore_index=None):
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    target = np.asarray(target).reshape(-1).astype(np.int64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction has {pred.size} pixels, target has {target.size}")
    keep = np.ones(target.shape, dtype=bool) if ignore_index is None else target != ignore_index
    pred, target = pred[keep], target[keep]
    k = cm.num_classes
    for name, arr in (("target", target), ("prediction", pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            bad = arr[(arr < 0) | (arr >= k)][0]
            raise ValueError(f"{name} class index {bad} outside [0, {k})")
    cm.counts += np.bincount(target * k + pred, minlength=k * k).reshape(k, k)
    return cm


def per_class_iou(counts):
    """IoU per class; NaN where the union is empty."""
    inter = np.diag(counts).astype(np.float64)
    union = counts.sum(axis=0) + counts.sum(axis=1) - np.diag(counts)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.maximum(union, 1), np.nan)


def miou(cm, classes=None):
    """Mean IoU over ``classes`` (default all), skipping classes with an empty union."""
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    iou = per_class_iou(counts)
    idx = range(len(iou)) if classes is None else classes
    vals = [iou[c] for c in idx if not np.isnan(iou[c])]
    if not vals:
        raise ValueError("every evaluated class has an empty union")
    return float(np.mean(vals))
