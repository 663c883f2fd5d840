"""Dense gaze heads read from the backbone's final hidden states."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from .backbone import BackboneOutput


@dataclass
class PersonTokens:
    tokens: torch.Tensor  # N x D
    anchors: List[Optional[int]]
    fallback: List[bool]


class HeatmapDecoder(nn.Module):
    """Person-conditioned vision grid -> (4 * grid) x (4 * grid) heatmap in [0, 1]."""

    def __init__(self, dim: int, num_vision: int):
        super().__init__()
        side = math.isqrt(num_vision)
        if side * side != num_vision:
            raise ValueError(f"{num_vision} vision tokens do not form a square grid")
        self.side = side
        half = dim // 2
        self.net = nn.Sequential(
            nn.ConvTranspose2d(dim, half, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.ConvTranspose2d(half, 1, 4, stride=2, padding=1),
        )
        nn.init.constant_(self.net[-1].bias, -4.0)

    def fuse(self, vision: torch.Tensor, person: torch.Tensor) -> torch.Tensor:
        return vision * person[:, None, :]

    def forward(self, vision: torch.Tensor, person: torch.Tensor) -> torch.Tensor:
        """``vision``: N x V x D, ``person``: N x D -> N x H' x W'."""
        fused = self.fuse(vision, person)
        n, v, d = fused.shape
        grid = fused.transpose(1, 2).reshape(n, d, self.side, self.side)
        return torch.sigmoid(self.net(grid))[:, 0]


class GazeHeads(nn.Module):
    def __init__(self, dim: int, num_vision: int):
        super().__init__()
        self.heatmap = HeatmapDecoder(dim, num_vision)
        self.inout = nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, 1))
        self.social = nn.Sequential(
            nn.Linear(2 * dim, dim), nn.GELU(), nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, 3)
        )
        self.fallback = nn.Parameter(torch.zeros(dim))

    @property
    def heatmap_side(self) -> int:
        return 4 * self.heatmap.side


def extract_tokens(out: BackboneOutput, anchors: Sequence[Sequence[Optional[int]]],
                   fallback: torch.Tensor) -> Tuple[torch.Tensor, List[PersonTokens]]:
    """Final-layer vision slice (B x V x D) and the states at each person's anchor.

    An anchor of ``None`` (unparseable or missing output) is replaced by the
    learned ``fallback`` vector and flagged.
    """
    vision = out.vision
    persons = []
    for b, row in enumerate(anchors):
        toks, flags = [], []
        for a in row:
            if a is None or not (out.num_vision <= a < out.lengths[b]):
                toks.append(fallback.to(out.hidden.dtype))
                flags.append(True)
            else:
                toks.append(out.hidden[b, a])
                flags.append(False)
        persons.append(PersonTokens(torch.stack(toks) if toks else out.hidden.new_zeros(0, out.hidden.shape[-1]),
                                    list(row), flags))
    return vision, persons


def decode_heatmap(heads: GazeHeads, vision: torch.Tensor, person: torch.Tensor) -> torch.Tensor:
    return heads.heatmap(vision, person)


def predict_inout(heads: GazeHeads, person: torch.Tensor) -> torch.Tensor:
    return heads.inout(person)[..., 0]


def predict_social(heads: GazeHeads, h_i: torch.Tensor, h_j: torch.Tensor) -> torch.Tensor:
    return heads.social(torch.cat([h_i, h_j], dim=-1))


def ordered_pairs(n: int) -> List[Tuple[int, int]]:
    return [(i, j) for i in range(n) for j in range(n) if i != j]


def social_logits(heads: GazeHeads, tokens: torch.Tensor) -> Tuple[List[Tuple[int, int]], torch.Tensor]:
    """Logits (LAH, LAEO, SA) for all N(N-1) ordered pairs of one scene."""
    pairs = ordered_pairs(tokens.shape[0])
    if not pairs:
        return pairs, tokens.new_zeros(0, 3)
    ii = torch.tensor([p[0] for p in pairs])
    jj = torch.tensor([p[1] for p in pairs])
    return pairs, predict_social(heads, tokens[ii], tokens[jj])


def heatmap_to_point(heatmap) -> Tuple[float, float]:
    """Normalized center of the peak cell; ties go to the smallest row, then column."""
    m = heatmap.detach().cpu().numpy() if isinstance(heatmap, torch.Tensor) else np.asarray(heatmap)
    h, w = m.shape
    r, c = divmod(int(np.argmax(m)), w)
    return ((c + 0.5) / w, (r + 0.5) / h)


def symmetrize_social(pairs: Sequence[Tuple[int, int]], probs: np.ndarray) -> dict:
    """Per ordered pair scores with LAEO and SA averaged over both orders; LAH stays ordered."""
    lookup = {p: probs[k] for k, p in enumerate(pairs)}
    out = {}
    for (i, j), pr in lookup.items():
        rev = lookup.get((j, i), pr)
        out[(i, j)] = (float(pr[0]), float((pr[1] + rev[1]) / 2.0), float((pr[2] + rev[2]) / 2.0))
    return out
