"""Per-scale fusion of image and point features with one-way distillation.

At every scale the point branch's features pass through a learner MLP,
get concatenated with the lifted image features and fused by another MLP.
The fused features are enhanced by a sigmoid gate over a projected copy of
the image features, while the learner output is projected back onto the
point features through a residual skip, leaving the point branch intact
when learner and skip start at zero. Two small heads classify the fused
and the enhanced point features; the fused head teaches the point head
through a KL term whose teacher side is detached, so no distillation
gradient ever reaches the fused path, and the whole fusion stack can be
dropped at inference.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, ValidationError
from .geometry import PixelMapping, lift_image_features_to_points
from .nets import LEAKY_SLOPE, Linear, MultiScaleFeatures2D, MultiScaleFeatures3D, ParamStore, upsample_nearest
from .sparsevox import devoxelize, filter_point_features_to_fov
from .tensor import (
    Tensor,
    add,
    concat_last_dim,
    detach,
    exp,
    leaky_relu,
    log_softmax_rows,
    mul_elementwise,
    scale,
    sigmoid,
    sum_all,
)
from .evalmetrics import cross_entropy

__all__ = [
    "FusionBlockParams",
    "LossBreakdown",
    "ScalePair",
    "distill_loss",
    "fuse",
    "multiscale_kd_step",
]


@dataclass
class ScalePair:
    """Aligned per-point features of both branches at one scale.

    ``f2d`` are image features lifted to the in-view points and ``f3d``
    the matching point-branch features, row for row.
    """

    f2d: Tensor
    f3d: Tensor
    scale_index: int = 1

    def __post_init__(self) -> None:
        if self.f2d.shape[0] != self.f3d.shape[0]:
            raise ShapeError(
                f"row mismatch between branches: {self.f2d.shape[0]} vs {self.f3d.shape[0]}"
            )


class FusionBlockParams:
    """Parameters of one fusion scale.

    The learner is a two-layer MLP, fuse and gate are two-layer MLPs on the
    hidden width, and the remaining pieces are single linears. The skip
    projection starts at zero so the point branch is unperturbed at
    initialization.
    """

    def __init__(self, store: ParamStore, rng: np.random.Generator, *,
                 feat_dim: int, hidden: int = 64, num_classes: int,
                 prefix: str):
        if num_classes < 2:
            raise ValidationError("fusion heads need at least two classes")
        self.feat_dim = feat_dim
        self.hidden = hidden
        self.num_classes = num_classes
        self.learner1 = Linear(store, f"{prefix}.learner.l1", feat_dim, hidden, rng)
        self.learner2 = Linear(store, f"{prefix}.learner.l2", hidden, hidden, rng)
        self.fuse1 = Linear(store, f"{prefix}.fuse.l1", hidden + feat_dim, hidden, rng)
        self.fuse2 = Linear(store, f"{prefix}.fuse.l2", hidden, hidden, rng)
        self.gate1 = Linear(store, f"{prefix}.gate.l1", hidden, hidden, rng)
        self.gate2 = Linear(store, f"{prefix}.gate.l2", hidden, hidden, rng)
        self.proj2d = Linear(store, f"{prefix}.proj2d", feat_dim, hidden, rng)
        self.skip = Linear(store, f"{prefix}.skip", hidden, feat_dim, rng, zero_init=True)
        self.head_fuse = Linear(store, f"{prefix}.head_fuse", hidden, num_classes, rng)
        self.head_3d = Linear(store, f"{prefix}.head_3d", feat_dim, num_classes, rng)


def fuse(pair: ScalePair, params: FusionBlockParams):
    """Blend one scale's features.

    Returns ``(fused_enhanced, points_enhanced, learner_out)``. The fused
    output is the projected image features plus the gated fused features;
    the point output is the original point features plus the skip-projected
    learner output.
    """
    if pair.f3d.shape[-1] != params.feat_dim or pair.f2d.shape[-1] != params.feat_dim:
        raise ShapeError(
            f"fusion block expects width {params.feat_dim}, got "
            f"{pair.f3d.shape[-1]} (points) and {pair.f2d.shape[-1]} (image)"
        )
    f_learner = params.learner2(leaky_relu(params.learner1(pair.f3d), LEAKY_SLOPE))
    fused = params.fuse2(
        leaky_relu(params.fuse1(concat_last_dim(f_learner, pair.f2d)), LEAKY_SLOPE)
    )
    gate = sigmoid(params.gate2(leaky_relu(params.gate1(fused), LEAKY_SLOPE)))
    fused_enhanced = add(params.proj2d(pair.f2d), mul_elementwise(gate, fused))
    points_enhanced = add(pair.f3d, params.skip(f_learner))
    return fused_enhanced, points_enhanced, f_learner


def distill_loss(teacher_logits, student_logits) -> Tensor:
    """KL divergence of teacher from student softmaxes, teacher detached.

    Mean over rows of ``sum_c p_c (log p_c - log q_c)`` where p comes from
    the detached teacher logits, so backward reaches only the student.
    """
    if teacher_logits.shape != student_logits.shape:
        raise ShapeError(
            f"logit shapes disagree: {teacher_logits.shape} vs {student_logits.shape}"
        )
    if len(teacher_logits.shape) != 2 or teacher_logits.shape[1] < 2:
        raise ValidationError("distillation needs (N, C) logits with C >= 2")
    n = teacher_logits.shape[0]
    if n == 0:
        return Tensor(0.0)
    teacher = detach(teacher_logits) if isinstance(teacher_logits, Tensor) else Tensor(np.asarray(teacher_logits, dtype=np.float64))
    student = student_logits if isinstance(student_logits, Tensor) else Tensor(np.asarray(student_logits, dtype=np.float64))
    log_p = log_softmax_rows(teacher)
    p = exp(log_p)
    log_q = log_softmax_rows(student)
    gap = add(log_p, scale(log_q, -1.0))
    return scale(sum_all(mul_elementwise(p, gap)), 1.0 / n)


@dataclass
class LossBreakdown:
    """Scalar loss tensors of one training step."""

    seg3d: Tensor
    seg2d: Tensor | None
    seg_fuse: list = field(default_factory=list)
    seg_scale3d: list = field(default_factory=list)
    kd: list = field(default_factory=list)
    total: Tensor = None

    def to_record(self, step: int) -> dict:
        def num(t):
            return None if t is None else float(t.item())

        return {
            "step": step,
            "seg3d": num(self.seg3d),
            "seg2d": num(self.seg2d),
            "seg_fuse": [num(t) for t in self.seg_fuse],
            "seg_scale3d": [num(t) for t in self.seg_scale3d],
            "kd": [num(t) for t in self.kd],
            "total": num(self.total),
        }


def multiscale_kd_step(features2d: MultiScaleFeatures2D,
                       features3d: MultiScaleFeatures3D,
                       mapping: PixelMapping,
                       params: list,
                       labels,
                       *,
                       seg3d: Tensor | None = None,
                       seg2d: Tensor | None = None,
                       kd_weight: float = 0.05) -> LossBreakdown:
    """Run every fusion scale and assemble the training loss.

    Per scale: image features are upsampled to full resolution and lifted
    to the in-view points, point features are gathered from the grid and
    restricted to the same points, both are fused, and the two heads are
    supervised with cross-entropy against the in-view labels plus the
    distillation term. ``seg3d``/``seg2d`` are the already computed decoder
    losses; the total adds every segmentation term once and the distilled
    terms scaled by ``kd_weight``.
    """
    if len(features2d) != len(features3d) or len(features3d) != len(params):
        raise ShapeError(
            f"scale counts disagree: {len(features2d)} image, "
            f"{len(features3d)} point, {len(params)} fusion"
        )
    if kd_weight < 0:
        raise ValidationError("kd_weight must be non-negative")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (len(mapping),):
        raise ShapeError("labels must have one entry per point")
    fov_labels = labels[mapping.valid]

    breakdown = LossBreakdown(
        seg3d=seg3d if seg3d is not None else Tensor(0.0),
        seg2d=seg2d,
    )
    height, width = features2d.input_hw
    for i, ((grid, vox_mapping), image, block) in enumerate(
        zip(features3d.scales, features2d.images, params)
    ):
        scale_no = i + 1
        try:
            factor = height // image.shape[0]
            lifted = lift_image_features_to_points(upsample_nearest(image, factor), mapping)
            points_all = devoxelize(grid, vox_mapping)
            points_fov = filter_point_features_to_fov(points_all, mapping)
            fused_e, points_e, _ = fuse(ScalePair(lifted, points_fov, scale_no), block)
            teacher = block.head_fuse(fused_e)
            student = block.head_3d(points_e)
            breakdown.seg_fuse.append(cross_entropy(teacher, fov_labels))
            breakdown.seg_scale3d.append(cross_entropy(student, fov_labels))
            breakdown.kd.append(distill_loss(teacher, student))
        except (ShapeError, ValidationError) as err:
            raise type(err)(f"scale {scale_no}: {err}") from err

    total = breakdown.seg3d
    if breakdown.seg2d is not None:
        total = add(total, breakdown.seg2d)
    for term in breakdown.seg_fuse:
        total = add(total, term)
    for term in breakdown.seg_scale3d:
        total = add(total, term)
    for term in breakdown.kd:
        total = add(total, scale(term, kd_weight))
    breakdown.total = total
    return breakdown
