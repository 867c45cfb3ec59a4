"""Segmentation metrics: confusion matrices, per-class IoU, mIoU and reports."""
import csv

import numpy as np

from .batchnorm import BatchStats
from .errors import InvalidInputError, UndefinedMetricError


class ConfusionMatrix:
    """``counts[t, p]`` = number of pixels with truth ``t`` predicted as ``p``."""

    def __init__(self, counts):
        counts = np.asarray(counts)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise InvalidInputError("confusion matrix must be square")
        if np.any(counts < 0):
            raise InvalidInputError("confusion counts must be non-negative")
        self.counts = counts.astype(np.int64)

    @classmethod
    def zeros(cls, num_classes):
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())

    def __add__(self, other):
        return ConfusionMatrix(self.counts + other.counts)

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def __repr__(self):
        return f"ConfusionMatrix({self.counts.tolist()})"


def confusion(pred, truth, num_classes):
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise InvalidInputError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    if pred.size and (
        pred.min() < 0 or truth.min() < 0 or pred.max() >= num_classes or truth.max() >= num_classes
    ):
        raise InvalidInputError("label id outside 0..num_classes-1")
    flat = truth.ravel().astype(np.int64) * num_classes + pred.ravel().astype(np.int64)
    counts = np.bincount(flat, minlength=num_classes * num_classes)
    return ConfusionMatrix(counts.reshape(num_classes, num_classes))


def iou_per_class(cm):
    """IoU for every class; ``nan`` where TP + FP + FN is zero."""
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    denom = c.sum(axis=0) + c.sum(axis=1) - tp
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(denom > 0, tp / denom, np.nan)


def miou(cm, subset=None):
    """Return ``(ious, mean)`` over ``subset`` (all classes when ``None``).

    ``ious`` lists the IoU of each subset class in subset order. Classes with
    an empty denominator show up as ``nan`` and are left out of the mean.
    False positives and negatives are counted against the full matrix.
    """
    if subset is None:
        subset = range(cm.num_classes)
    subset = [int(s) for s in subset]
    if not subset:
        raise InvalidInputError("class subset must not be empty")
    if any(not 0 <= s < cm.num_classes for s in subset):
        raise InvalidInputError("class subset refers to unknown classes")
    ious = iou_per_class(cm)[subset]
    valid = ious[~np.isnan(ious)]
    if valid.size == 0:
        raise UndefinedMetricError("no class in the subset has a defined IoU")
    return [float(v) for v in ious], float(valid.mean())


def pixel_accuracy(cm):
    return float(np.trace(cm.counts) / cm.total)


def evaluate_predictions(preds, truths, num_classes, subset=None):
    cm = confusion(preds, truths, num_classes)
    ious, m = miou(cm, subset)
    return {"confusion": cm, "iou": ious, "miou": m, "accuracy": pixel_accuracy(cm)}


def format_table(ious, mean, class_ids, class_names=None):
    """Pretty-print per-class IoU and mIoU (percent) as a two-row table."""
    names = class_names or [f"c{s}" for s in class_ids]
    heads = list(names) + ["mIoU"]
    vals = ["  -  " if np.isnan(v) else f"{100 * v:5.1f}" for v in ious] + [f"{100 * mean:5.1f}"]
    widths = [max(len(h), len(v)) for h, v in zip(heads, vals)]
    row = lambda cells: "| " + " | ".join(c.rjust(w) for c, w in zip(cells, widths)) + " |"  # noqa: E731
    rule = "+-" + "-+-".join("-" * w for w in widths) + "-+"
    return "\n".join([rule, row(heads), rule, row(vals), rule])


def write_metrics_csv(path, ious, mean, class_ids, accuracy=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "iou"])
        for s, v in zip(class_ids, ious):
            w.writerow([s, repr(v)])
        w.writerow(["mIoU", repr(mean)])
        if accuracy is not None:
            w.writerow(["accuracy", repr(accuracy)])


def evaluate_model(model, images, labels, subset=None, batch_size=None, batch_stats=False):
    """Confusion-based metrics of ``model`` on a labelled image set.

    Eval mode by default, so every image is predicted independently with the
    stored running statistics. ``batch_stats=True`` instead normalizes each
    chunk of ``batch_size`` images with its own statistics.
    """
    images = np.asarray(images)
    labels = np.asarray(labels)
    if batch_stats and not batch_size:
        raise InvalidInputError("batch-statistics evaluation needs a batch size")
    step = batch_size or len(images)
    mode = BatchStats() if batch_stats else None
    cm = ConfusionMatrix.zeros(model.num_classes)
    for start in range(0, len(images), step):
        pred = model.predict(images[start : start + step], mode)
        cm = cm + confusion(pred, labels[start : start + step], model.num_classes)
    ious, m = miou(cm, subset)
    return {"confusion": cm, "iou": ious, "miou": m, "accuracy": pixel_accuracy(cm)}
