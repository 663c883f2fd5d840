"""Head crops, the head encoder and placeholder injection."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import PLACEHOLDER, EmbeddedSequence
from .prompts import PromptPlan
from .scene import Box, clamp_box


@dataclass
class HeadCrop:
    pixels: torch.Tensor  # 3 x side x side
    person: int


def crop_head(image: np.ndarray, box: Box, side: int, person: int = 0) -> HeadCrop:
    """Crop ``box`` (clamped to the image, with a warning when it sticks out) and resize to ``side``."""
    h, w = image.shape[:2]
    clamped = clamp_box(box, w, h)
    if tuple(clamped) != tuple(float(v) for v in box):
        warnings.warn(f"head box {tuple(box)} clamped to image bounds {clamped}", stacklevel=2)
    x1, y1, x2, y2 = clamped
    c0, r0 = int(np.floor(x1)), int(np.floor(y1))
    c1, r1 = max(int(np.ceil(x2)), c0 + 1), max(int(np.ceil(y2)), r0 + 1)
    patch = torch.from_numpy(np.ascontiguousarray(image[r0:r1, c0:c1], dtype=np.float32)).permute(2, 0, 1)
    patch = F.interpolate(patch[None], size=(side, side), mode="bilinear", align_corners=False)[0]
    return HeadCrop(pixels=patch, person=person)


class HeadEncoder(nn.Module):
    """Small conv net + linear projection to the backbone width."""

    def __init__(self, out_dim: int, width: int = 32):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(width, width, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
            nn.GELU(),
        )
        self.proj = nn.Linear(2 * width + 3, out_dim)

    def forward(self, crops: torch.Tensor) -> torch.Tensor:
        x = (crops - 0.5) / 0.25
        feats = self.features(x).mean(dim=(2, 3))
        color = x.mean(dim=(2, 3))
        return self.proj(torch.cat([feats, color], dim=1))


def encode_heads(encoder: HeadEncoder, crops: Sequence[HeadCrop]) -> torch.Tensor:
    dtype = next(encoder.parameters()).dtype
    return encoder(torch.stack([c.pixels for c in crops]).to(dtype))


def inject(seq: EmbeddedSequence, plan: PromptPlan, embeddings: torch.Tensor) -> EmbeddedSequence:
    """Overwrite the placeholder rows ``num_vision + g_i`` with the head embeddings.

    Every other row, the positions and the modality tags are left untouched.
    """
    if len(embeddings) != len(plan.gaze_pad_index):
        raise ValueError(f"{len(embeddings)} head embeddings for {len(plan.gaze_pad_index)} placeholders")
    rows = torch.tensor(plan.gaze_pad_index, dtype=torch.long) + seq.num_vision
    if len(rows) and (rows.max() >= len(seq) or not bool((seq.modality[rows] == PLACEHOLDER).all())):
        raise ValueError("injection index is not tagged as a placeholder")
    out = seq.embeddings.clone()
    out[rows] = embeddings.to(out.dtype)
    return seq.replace(out)
