"""Static figures: per-person heatmap overlays, training curves and metric summaries."""

from __future__ import annotations

from typing import Dict, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

GT_COLOR = "yellow"
PRED_COLOR = "red"


def render_overlay(path: str, image: np.ndarray, heatmap: Optional[np.ndarray], point=None,
                   gt_points: Sequence = (), head_box=None, title: Optional[str] = None) -> None:
    """Image with the heatmap blended on top, ground truth in yellow and the prediction in red."""
    h, w = image.shape[:2]
    fig, ax = plt.subplots(figsize=(4, 4 * h / w), dpi=100)
    ax.imshow(np.clip(image, 0, 1), extent=(0, w, h, 0))
    if heatmap is not None:
        ax.imshow(np.asarray(heatmap), cmap="jet", alpha=0.45, extent=(0, w, h, 0), vmin=0, vmax=1,
                  interpolation="bilinear")
    if head_box is not None:
        x1, y1, x2, y2 = head_box
        ax.add_patch(Rectangle((x1, y1), x2 - x1, y2 - y1, fill=False, edgecolor="white", linewidth=1.5))
    for gx, gy in gt_points:
        ax.plot(gx * w, gy * h, "o", color=GT_COLOR, markersize=7, markeredgecolor="black")
    if point is not None:
        ax.plot(point[0] * w, point[1] * h, "o", color=PRED_COLOR, markersize=7, markeredgecolor="black")
        if head_box is not None:
            cx, cy = (head_box[0] + head_box[2]) / 2, (head_box[1] + head_box[3]) / 2
            ax.plot([cx, point[0] * w], [cy, point[1] * h], "-", color=PRED_COLOR, linewidth=1)
    if title:
        ax.set_title(title, fontsize=8)
    ax.set_xlim(0, w)
    ax.set_ylim(h, 0)
    ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, format="png")
    plt.close(fig)


def plot_losses(path: str, history: Sequence[dict], keys=("l_total", "l_lm", "l_hm", "l_inout", "l_soc")) -> None:
    fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
    steps = [r["step"] for r in history]
    for k in keys:
        vals = [r[k] for r in history if k in r]
        if len(vals) == len(steps) and vals:
            ax.plot(steps, vals, label=k)
    ax.set_xlabel("step")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="png")
    plt.close(fig)


def plot_metrics(path: str, metrics: Dict[str, float]) -> None:
    """Horizontal bar chart of a metric report."""
    names = sorted(metrics)
    fig, ax = plt.subplots(figsize=(6, 0.35 * len(names) + 1), dpi=100)
    ax.barh(names, [metrics[n] for n in names], color="tab:blue")
    for k, n in enumerate(names):
        ax.text(metrics[n], k, f" {metrics[n]:.3f}", va="center", fontsize=8)
    ax.invert_yaxis()
    fig.tight_layout()
    fig.savefig(path, format="png")
    plt.close(fig)
