"""Segmentation losses and the mIoU metric.

Logits and probabilities have one column per class ``1..K`` (column
``k`` holds class ``k + 1``). Label 0 is ignored everywhere.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ops

IGNORE_LABEL = 0
FOCAL_GAMMA = 2.0


class EmptyTargetWarning(RuntimeWarning):
    """Raised (as a warning) when every point carries the ignore label."""


def _scored(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() > num_classes):
        raise ValueError(f"labels must lie in 0..{num_classes}")
    return labels


def _zero_loss(like: Tensor, what: str) -> Tensor:
    warnings.warn(f"{what}: no scored points, loss is 0", EmptyTargetWarning, stacklevel=3)
    return ops.mul(ops.sum(like), 0.0)


def focal_loss(logits: Tensor, labels: np.ndarray, gamma: float = FOCAL_GAMMA) -> Tensor:
    """Mean of ``-(1 - p_t)^gamma * log p_t`` over points with a label."""
    labels = _scored(labels, logits.shape[1])
    keep = np.flatnonzero(labels != IGNORE_LABEL)
    if keep.size == 0:
        return _zero_loss(logits, "focal_loss")
    log_p = ops.log_softmax(ops.take_rows(logits, keep), axis=1)
    log_pt = ops.take_along_last(log_p, labels[keep] - 1)
    if gamma == 0:
        return ops.neg(ops.mean(log_pt))
    modulator = ops.power(ops.sub(1.0, ops.exp(log_pt)), gamma)
    return ops.neg(ops.mean(ops.mul(modulator, log_pt)))


def lovasz_gradient(sorted_truth: np.ndarray) -> np.ndarray:
    """Increments of the Jaccard loss along a descending-error ordering."""
    gts = sorted_truth.sum()
    intersection = gts - np.cumsum(sorted_truth)
    union = gts + np.cumsum(1.0 - sorted_truth)
    jaccard = 1.0 - intersection / union
    jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Lovász extension of the per-class Jaccard loss, averaged over the
    classes present among the scored labels.

    The sort order is treated as constant when differentiating.
    """
    labels = _scored(labels, probs.shape[1])
    keep = np.flatnonzero(labels != IGNORE_LABEL)
    present = np.unique(labels[keep])
    if present.size == 0:
        return _zero_loss(probs, "lovasz_softmax")
    p = probs.data
    grad_p = np.zeros_like(p)
    total = 0.0
    for c in present:
        col = c - 1
        truth = (labels[keep] == c).astype(np.float64)
        pc = p[keep, col].astype(np.float64)
        errors = np.abs(truth - pc)
        order = np.argsort(-errors, kind="stable")
        weights = lovasz_gradient(truth[order])
        total += float(errors[order] @ weights)
        # d|t - p|/dp is -1 on the true class and +1 elsewhere
        sign = np.where(truth[order] > 0, -1.0, 1.0)
        grad_p[keep[order], col] += sign * weights
    scale = 1.0 / present.size
    out = np.asarray(total * scale, dtype=p.dtype)
    grad_p *= scale

    def back(g):
        return (g * grad_p,)

    return Tensor.from_op(out, (probs,), back)


def total_loss(logits: Tensor, labels: np.ndarray, gamma: float = FOCAL_GAMMA) -> Tensor:
    """Focal loss plus Lovász-softmax on the softmax probabilities."""
    return ops.add(focal_loss(logits, labels, gamma), lovasz_softmax(ops.softmax(logits, axis=1), labels))


@dataclass
class ConfusionMatrix:
    """Counts indexed [true class - 1, predicted class - 1]."""

    counts: np.ndarray

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @classmethod
    def from_labels(cls, truth: np.ndarray, pred: np.ndarray, num_classes: int) -> "ConfusionMatrix":
        cm = cls.empty(num_classes)
        cm.update(truth, pred)
        return cm

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def update(self, truth: np.ndarray, pred: np.ndarray) -> None:
        truth = np.asarray(truth, dtype=np.int64).reshape(-1)
        pred = np.asarray(pred, dtype=np.int64).reshape(-1)
        if truth.shape != pred.shape:
            raise ValueError(f"{truth.size} labels but {pred.size} predictions")
        k = self.num_classes
        scored = truth != IGNORE_LABEL
        t, p = truth[scored], pred[scored]
        if t.size and (t.max() > k or p.min() < 1 or p.max() > k or t.min() < 0):
            raise ValueError(f"labels and predictions must lie in 1..{k}")
        np.add.at(self.counts, (t - 1, p - 1), 1)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.counts + other.counts)


def miou(cm: ConfusionMatrix) -> tuple[np.ndarray, float]:
    """Per-class IoU (nan where the class never occurs) and their mean.

    The mean is nan when no class has a nonzero denominator.
    """
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    denom = c.sum(axis=0) + c.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(denom > 0, tp / denom, np.nan)
    valid = denom > 0
    mean = float(per_class[valid].mean()) if valid.any() else float("nan")
    return per_class, mean


def point_accuracy(truth: np.ndarray, pred: np.ndarray) -> float:
    truth = np.asarray(truth).reshape(-1)
    scored = truth != IGNORE_LABEL
    if not scored.any():
        return float("nan")
    return float((np.asarray(pred).reshape(-1)[scored] == truth[scored]).mean())
