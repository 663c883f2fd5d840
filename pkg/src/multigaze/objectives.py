"""Ground-truth heatmaps and the multi-task losses."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F


@dataclass
class LossWeights:
    lm: float = 1.0
    hm: float = 10.0
    inout: float = 0.1
    soc: float = 1.0

    def __post_init__(self):
        if min(self.lm, self.hm, self.inout, self.soc) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossReport:
    l_lm: torch.Tensor
    l_hm: torch.Tensor
    l_inout: torch.Tensor
    l_soc: torch.Tensor
    l_total: torch.Tensor
    counts: Dict[str, int] = field(default_factory=dict)

    def as_dict(self) -> Dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("l_lm", "l_hm", "l_inout", "l_soc", "l_total")}


def render_gaussian(target: Tuple[float, float], height: int = 64, width: int = 64, sigma: float = 3.0) -> np.ndarray:
    """Peak-normalized Gaussian at ``target`` (normalized x, y); sigma in cells.

    Cell ``(r, c)`` is evaluated at its center ``(c + 0.5, r + 0.5)``.
    """
    x, y = target
    cols = np.arange(width, dtype=np.float64) + 0.5 - x * width
    rows = np.arange(height, dtype=np.float64) + 0.5 - y * height
    d2 = cols[None, :] ** 2 + rows[:, None] ** 2
    return np.exp(-d2 / (2.0 * sigma * sigma))


def loss_lm(logits: torch.Tensor, target_ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mask-weighted mean token cross-entropy. Weight-0 positions get exactly zero gradient."""
    weights = mask.to(logits.dtype)
    total = weights.sum()
    if float(total) == 0.0:
        warnings.warn("language loss mask is all zero; loss defined as 0", stacklevel=2)
        return logits.new_zeros(())
    ce = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), target_ids.reshape(-1), reduction="none")
    ce = torch.where(weights.reshape(-1) > 0, ce, torch.zeros_like(ce))
    return (ce * weights.reshape(-1)).sum() / total


def loss_hm(pred: torch.Tensor, gt: torch.Tensor, inside: bool) -> torch.Tensor:
    if pred.shape != gt.shape:
        raise ValueError(f"heatmap shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    if not inside:
        return pred.new_zeros(())
    return ((pred - gt) ** 2).mean()


def heatmap_loss(preds: torch.Tensor, gts: torch.Tensor, inside: torch.Tensor) -> torch.Tensor:
    """Mean of per-person MSE over the persons flagged inside (N x H x W inputs)."""
    if preds.shape != gts.shape:
        raise ValueError(f"heatmap shape mismatch {tuple(preds.shape)} vs {tuple(gts.shape)}")
    sel = inside.bool()
    if not bool(sel.any()):
        return preds.new_zeros(())
    return ((preds[sel] - gts[sel]) ** 2).mean(dim=(1, 2)).mean()


def loss_inout(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=logits.dtype)
    if logits.numel() == 0:
        return logits.new_zeros(())
    return F.binary_cross_entropy_with_logits(logits, labels.expand_as(logits))


def loss_social(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """BCE on each of the three logits, averaged over pairs and categories."""
    if logits.numel() == 0:
        return logits.new_zeros(())
    return F.binary_cross_entropy_with_logits(logits, torch.as_tensor(labels, dtype=logits.dtype))


def total_loss(l_lm, l_hm, l_inout, l_soc, weights: Optional[LossWeights] = None):
    w = weights or LossWeights()
    return w.lm * l_lm + w.hm * l_hm + w.inout * l_inout + w.soc * l_soc
