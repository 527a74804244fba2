"""Segmentation losses, confusion-matrix metrics and test-time voting.

Losses accept autodiff tensors (gradients flow) or plain arrays and always
return a scalar tensor. Points labeled with the reserved ignore value 255
are removed before any arithmetic, so adding ignored points leaves every
loss and metric bitwise unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, ValidationError
from .geometry import IGNORE_LABEL, PointCloud
from .tensor import (
    Tensor,
    add,
    gather_rows,
    log_softmax_rows,
    mul_elementwise,
    scale,
    softmax_rows,
    sum_all,
)

__all__ = [
    "ConfusionMatrix",
    "DistanceBins",
    "accumulate",
    "combined_seg_loss",
    "cross_entropy",
    "distance_binned_miou",
    "format_metrics_table",
    "fwiou",
    "lovasz_softmax",
    "metrics_report",
    "miou",
    "overall_acc",
    "per_class_iou",
    "tta_vote",
]


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=np.float64))


def _check_labels(labels: np.ndarray, num_classes: int, ignore: int) -> None:
    bad = labels[(labels != ignore) & ((labels < 0) | (labels >= num_classes))]
    if bad.size:
        raise ValidationError(
            f"label {int(bad[0])} is outside [0, {num_classes}) and is not the "
            f"ignore value {ignore}"
        )


def cross_entropy(logits, labels, ignore: int = IGNORE_LABEL) -> Tensor:
    """Mean negative log-likelihood over the non-ignored rows.

    Returns a zero scalar if every row is ignored.
    """
    logits = _as_tensor(logits)
    if len(logits.shape) != 2:
        raise ShapeError(f"logits must be (N, C), got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (logits.shape[0],):
        raise ShapeError("labels must have one entry per logit row")
    num_classes = logits.shape[1]
    _check_labels(labels, num_classes, ignore)

    keep = np.flatnonzero(labels != ignore)
    if keep.size == 0:
        return Tensor(0.0)
    log_probs = gather_rows(log_softmax_rows(logits), keep)
    # Pick out the log-probability of each row's own class with a mask of
    # -1/K entries, so the mean stays inside the graph.
    pick = np.zeros((keep.size, num_classes))
    pick[np.arange(keep.size), labels[keep]] = -1.0 / keep.size
    return sum_all(mul_elementwise(log_probs, Tensor(pick)))


def _jaccard_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Gradient of the Jaccard extension along a fixed error ordering."""
    total = gt_sorted.sum()
    intersection = total - np.cumsum(gt_sorted)
    union = total + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    if len(gt_sorted) > 1:
        jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax(probabilities, labels, ignore: int = IGNORE_LABEL) -> Tensor:
    """Jaccard-extension loss on row-normalized class probabilities.

    Averaged over the classes that appear among the non-ignored labels;
    the loss is 0 on a perfect one-hot prediction and at most 1. Sorting
    uses the forward values and the gradient flows through that fixed
    permutation.
    """
    probs = _as_tensor(probabilities)
    if len(probs.shape) != 2:
        raise ShapeError(f"probabilities must be (N, C), got {probs.shape}")
    num_classes = probs.shape[1]
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (probs.shape[0],):
        raise ShapeError("labels must have one entry per probability row")
    _check_labels(labels, num_classes, ignore)
    row_sums = probs.data.sum(axis=1)
    if probs.shape[0] and np.abs(row_sums - 1.0).max() > 1e-5:
        raise ValidationError("probability rows must sum to 1")

    keep = np.flatnonzero(labels != ignore)
    if keep.size == 0:
        return Tensor(0.0)
    kept = gather_rows(probs, keep)
    kept_labels = labels[keep]

    present = np.unique(kept_labels)
    terms = None
    for cls in present:
        fg = (kept_labels == cls).astype(np.float64)
        # errors = 1 - p for foreground rows, p otherwise; the class column
        # is extracted with a one-hot matmul to stay inside the graph.
        sign = Tensor((1.0 - 2.0 * fg)[:, None])
        offset = Tensor(fg[:, None])
        onehot = np.zeros((num_classes, 1))
        onehot[cls, 0] = 1.0
        col = kept @ Tensor(onehot)
        errors = add(offset, mul_elementwise(sign, col))
        order = np.argsort(-errors.data.reshape(-1), kind="stable")
        grad = _jaccard_grad(fg[order])
        sorted_errors = gather_rows(errors, order)
        term = sum_all(mul_elementwise(sorted_errors, Tensor(grad[:, None])))
        terms = term if terms is None else add(terms, term)
    return scale(terms, 1.0 / len(present))


def combined_seg_loss(logits, labels, ignore: int = IGNORE_LABEL,
                      lovasz_weight: float = 1.0) -> Tensor:
    """Cross-entropy plus the Jaccard-extension loss on the same logits."""
    logits = _as_tensor(logits)
    ce = cross_entropy(logits, labels, ignore=ignore)
    lv = lovasz_softmax(softmax_rows(logits), labels, ignore=ignore)
    return add(ce, scale(lv, lovasz_weight))


@dataclass
class ConfusionMatrix:
    """Integer class-vs-class counts; rows are truth, columns prediction."""

    num_classes: int
    counts: np.ndarray = field(default=None)

    def __post_init__(self) -> None:
        if self.num_classes < 1:
            raise ValidationError("need at least one class")
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        else:
            self.counts = np.asarray(self.counts, dtype=np.int64)
            if self.counts.shape != (self.num_classes, self.num_classes):
                raise ShapeError("counts must be (C, C)")
            if np.any(self.counts < 0):
                raise ValidationError("counts must be non-negative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def empty(self) -> bool:
        return self.total == 0

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ShapeError("cannot merge matrices with different class counts")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)


def accumulate(cm: ConfusionMatrix, predictions, labels,
               ignore: int = IGNORE_LABEL) -> ConfusionMatrix:
    """Return a new matrix with (truth, prediction) pairs added."""
    predictions = np.asarray(predictions, dtype=np.int64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if predictions.shape != labels.shape:
        raise ShapeError("predictions and labels must have the same length")
    c = cm.num_classes
    _check_labels(labels, c, ignore)
    keep = labels != ignore
    predictions = predictions[keep]
    labels = labels[keep]
    if predictions.size and (predictions.min() < 0 or predictions.max() >= c):
        raise ValidationError(f"predictions must lie in [0, {c})")
    binned = np.bincount(labels * c + predictions, minlength=c * c)
    return ConfusionMatrix(c, cm.counts + binned.reshape(c, c))


def per_class_iou(cm: ConfusionMatrix) -> np.ndarray:
    """IoU per class; NaN where a class never occurs in truth or prediction."""
    tp = np.diag(cm.counts).astype(np.float64)
    denom = cm.counts.sum(axis=1) + cm.counts.sum(axis=0) - np.diag(cm.counts)
    out = np.full(cm.num_classes, np.nan)
    mask = denom > 0
    out[mask] = tp[mask] / denom[mask]
    return out


def miou(cm: ConfusionMatrix) -> float:
    """Mean IoU over the classes present in truth or prediction; 0 if empty."""
    if cm.empty:
        return 0.0
    ious = per_class_iou(cm)
    mask = ~np.isnan(ious)
    if not mask.any():
        return 0.0
    return float(ious[mask].mean())


def fwiou(cm: ConfusionMatrix) -> float:
    """IoU weighted by ground-truth class frequency; 0 if empty."""
    if cm.empty:
        return 0.0
    ious = per_class_iou(cm)
    freq = cm.counts.sum(axis=1).astype(np.float64) / cm.total
    mask = ~np.isnan(ious)
    return float((freq[mask] * ious[mask]).sum())


def overall_acc(cm: ConfusionMatrix) -> float:
    if cm.empty:
        return 0.0
    return float(np.diag(cm.counts).sum() / cm.total)


@dataclass
class DistanceBins:
    """Half-open range-to-sensor bins; the last edge may be infinity."""

    edges: tuple = (0.0, 10.0, 20.0, 30.0, 40.0, np.inf)

    def __post_init__(self) -> None:
        edges = tuple(float(e) for e in self.edges)
        if len(edges) < 2:
            raise ValidationError("need at least two bin edges")
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise ValidationError("bin edges must be strictly ascending")
        self.edges = edges

    @property
    def num_bins(self) -> int:
        return len(self.edges) - 1

    def assign(self, distances: np.ndarray) -> np.ndarray:
        """Bin index per distance, or -1 when outside every bin."""
        distances = np.asarray(distances, dtype=np.float64)
        idx = np.searchsorted(np.asarray(self.edges), distances, side="right") - 1
        idx[(distances < self.edges[0]) | (distances >= self.edges[-1])] = -1
        return idx


def distance_binned_miou(predictions, labels, coords, bins: DistanceBins,
                         ignore: int = IGNORE_LABEL, num_classes: int | None = None):
    """Per-bin confusion matrices and mIoU, binned by range to the origin.

    Returns a list of ``{"lo", "hi", "miou", "populated", "cm"}`` dicts.
    """
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise ShapeError("coords must be (N, 3)")
    if not (len(predictions) == len(labels) == len(coords)):
        raise ShapeError("predictions, labels and coords must align")
    if num_classes is None:
        known = labels[labels != ignore]
        num_classes = int(max(known.max() if known.size else 0, predictions.max() if predictions.size else 0)) + 1
    distances = np.linalg.norm(coords, axis=1)
    which = bins.assign(distances)
    out = []
    for b in range(bins.num_bins):
        sel = which == b
        cm = accumulate(ConfusionMatrix(num_classes), predictions[sel], labels[sel], ignore=ignore)
        out.append({
            "lo": bins.edges[b],
            "hi": bins.edges[b + 1],
            "miou": miou(cm),
            "populated": not cm.empty,
            "cm": cm,
        })
    return out


def tta_vote(infer_fn, cloud: PointCloud, angles: int = 12) -> np.ndarray:
    """Average softmax scores over rotations of the cloud about the z axis.

    ``infer_fn`` takes a PointCloud and returns (N, C) logits. Point order
    is preserved by every rotation so no inverse permutation is needed.
    """
    if angles < 1:
        raise ValidationError("angles must be at least 1")
    total = None
    for k in range(angles):
        theta = 2.0 * np.pi * k / angles
        c, s = np.cos(theta), np.sin(theta)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        rotated = PointCloud(cloud.coords @ rot.T, cloud.intensity)
        logits = np.asarray(infer_fn(rotated), dtype=np.float64)
        if logits.ndim != 2 or logits.shape[0] != len(cloud):
            raise ShapeError("infer_fn must return (N, C) logits")
        scores = softmax_rows(Tensor(logits)).data
        total = scores if total is None else total + scores
    return total / angles


def metrics_report(cm: ConfusionMatrix, bins_result=None) -> dict:
    """Bundle the headline metrics into a JSON-ready dictionary."""
    ious = per_class_iou(cm)
    report = {
        "per_class_iou": [None if np.isnan(v) else float(v) for v in ious],
        "miou": miou(cm),
        "fwiou": fwiou(cm),
        "acc": overall_acc(cm),
        "empty": cm.empty,
        "distance_bins": [],
    }
    if bins_result is not None:
        report["distance_bins"] = [
            {
                "lo": entry["lo"],
                "hi": entry["hi"],
                "miou": entry["miou"],
                "populated": entry["populated"],
            }
            for entry in bins_result
        ]
    return report


def format_metrics_table(report: dict) -> str:
    """Render a metrics report as an aligned plain-text table."""
    lines = []
    lines.append(f"{'class':>8}  {'iou':>8}")
    for i, value in enumerate(report["per_class_iou"]):
        shown = "-" if value is None else f"{value:8.4f}"
        lines.append(f"{i:>8}  {shown:>8}")
    lines.append("")
    lines.append(f"{'miou':>8}  {report['miou']:8.4f}")
    lines.append(f"{'fwiou':>8}  {report['fwiou']:8.4f}")
    lines.append(f"{'acc':>8}  {report['acc']:8.4f}")
    if report["distance_bins"]:
        lines.append("")
        lines.append(f"{'range_lo':>8}  {'range_hi':>8}  {'miou':>8}")
        for entry in report["distance_bins"]:
            hi = "inf" if np.isinf(entry["hi"]) else f"{entry['hi']:.1f}"
            shown = f"{entry['miou']:8.4f}" if entry["populated"] else "-"
            lines.append(f"{entry['lo']:>8.1f}  {hi:>8}  {shown:>8}")
    return "\n".join(lines) + "\n"
