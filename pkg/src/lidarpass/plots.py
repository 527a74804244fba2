"""Figure rendering for evaluation reports and training logs.

Each helper draws one figure and writes it straight to a file next to the
CSV output, using the non-interactive Agg backend so the command line
works on headless machines.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "save_distance_miou_figure",
    "save_loss_curves_figure",
    "save_per_class_iou_figure",
]


def _finish(fig, path) -> None:
    # Software metadata is suppressed so repeated runs give identical bytes.
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def save_per_class_iou_figure(per_class_iou, path) -> None:
    """Bar chart of IoU per class; absent classes are drawn at zero."""
    values = [0.0 if v is None else float(v) for v in per_class_iou]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(np.arange(len(values)), values, color="#4878cf")
    ax.set_xlabel("class")
    ax.set_ylabel("IoU")
    ax.set_ylim(0.0, 1.0)
    ax.set_xticks(np.arange(len(values)))
    ax.set_title("per-class IoU")
    _finish(fig, path)


def save_distance_miou_figure(distance_bins, path) -> None:
    """mIoU against range-to-sensor bins."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    centers = np.arange(len(distance_bins))
    values = [b["miou"] if b["populated"] else np.nan for b in distance_bins]
    labels = []
    for b in distance_bins:
        hi = "inf" if np.isinf(b["hi"]) else f"{b['hi']:.0f}"
        labels.append(f"{b['lo']:.0f}-{hi}")
    ax.plot(centers, values, marker="o", color="#d1022f")
    ax.set_xticks(centers)
    ax.set_xticklabels(labels, rotation=30)
    ax.set_xlabel("range to sensor (m)")
    ax.set_ylabel("mIoU")
    ax.set_ylim(0.0, 1.0)
    ax.set_title("mIoU by distance")
    _finish(fig, path)


def save_loss_curves_figure(records, path) -> None:
    """Training curves from per-step loss records."""
    steps = [r["step"] for r in records]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, [r["total"] for r in records], label="total", color="#333333")
    ax.plot(steps, [r["seg3d"] for r in records], label="seg3d", color="#4878cf")
    if any(r.get("seg2d") is not None for r in records):
        ax.plot(
            steps,
            [r["seg2d"] if r["seg2d"] is not None else np.nan for r in records],
            label="seg2d",
            color="#6acc65",
        )
    if any(r.get("kd") for r in records):
        ax.plot(
            steps,
            [sum(r["kd"]) if r["kd"] else np.nan for r in records],
            label="kd (sum)",
            color="#d65f5f",
        )
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    ax.set_title("training losses")
    _finish(fig, path)
