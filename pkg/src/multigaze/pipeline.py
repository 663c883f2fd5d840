"""End-to-end model: prompt -> embed -> inject -> backbone -> gaze heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from .backbone import BackboneConfig, EmbeddedSequence, build_backbone, embed, forward_teacher_forced, generate, prepare_image
from .gaze_branch import GazeHeads, extract_tokens, heatmap_to_point, social_logits, symmetrize_social
from .grounding import HeadEncoder, crop_head, encode_heads, inject
from .objectives import LossReport, LossWeights, heatmap_loss, loss_inout, loss_lm, loss_social, render_gaussian, total_loss
from .prompts import PersonOutputRecord, PromptPlan, align_records, build_prompt, parse_output, serialize_targets
from .scene import Scene
from .tokenizer import default_tokenizer


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head_side: int = 32
    head_width: int = 32
    sigma: float = 3.0
    task_mode: str = "localize"
    inject: bool = True
    # "output": person tokens at the P of each answer block; "prompt": at the
    # last token of each person's prompt entry (spatial-decoding-only variant)
    anchor: str = "output"
    max_new_tokens: int = 160

    def __post_init__(self):
        if self.anchor not in ("output", "prompt"):
            raise ValueError(f"anchor must be 'output' or 'prompt', got {self.anchor!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"] = self.backbone.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["backbone"] = BackboneConfig(**d.get("backbone", {}))
        return cls(**d)


@dataclass
class ScenePrediction:
    points: List[Optional[Tuple[float, float]]]
    inout_scores: List[float]
    status_text: List[str]
    categories: List[Optional[str]]
    valid: List[bool]
    heatmaps: np.ndarray
    pairs: Dict[Tuple[int, int], Tuple[float, float, float]]
    text: str = ""
    truncated: bool = False


class GazeModel(nn.Module):
    def __init__(self, config: Optional[ModelConfig] = None):
        super().__init__()
        self.config = config or ModelConfig()
        self.tokenizer = default_tokenizer()
        bcfg = self.config.backbone
        if bcfg.vocab_size != self.tokenizer.vocab_size:
            raise ValueError(f"backbone vocab {bcfg.vocab_size} != tokenizer vocab {self.tokenizer.vocab_size}")
        self.backbone = build_backbone(bcfg)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(bcfg.init_seed + 2)
            self.head_encoder = HeadEncoder(bcfg.hidden_dim, self.config.head_width)
            self.heads = GazeHeads(bcfg.hidden_dim, bcfg.num_vision_tokens)

    @property
    def dtype(self):
        return self.heads.fallback.dtype

    @property
    def heatmap_side(self) -> int:
        return self.heads.heatmap_side

    # -- shared steps -------------------------------------------------------

    def _embed_scene(self, scene: Scene, plan: PromptPlan, extra_ids: Sequence[int] = ()) -> EmbeddedSequence:
        image = scene.load_image()
        seq = embed(self.backbone, prepare_image(image, self.config.backbone.image_side), plan,
                    extra_ids, gaze_pad_id=self.tokenizer.gaze_pad_id)
        if self.config.inject:
            crops = [crop_head(image, p.head_box, self.config.head_side, k) for k, p in enumerate(scene.persons)]
            seq = inject(seq, plan, encode_heads(self.head_encoder, crops))
        return seq

    def _anchors(self, plan: PromptPlan, output_offsets: Sequence[Optional[int]]) -> List[Optional[int]]:
        V = self.config.backbone.num_vision_tokens
        if self.config.anchor == "prompt":
            return [V + end - 1 for _, end in plan.person_slot_spans]
        return [None if a is None else V + len(plan) + a for a in output_offsets]

    def _person_outputs(self, vision: torch.Tensor, tokens: torch.Tensor):
        n = tokens.shape[0]
        heatmaps = self.heads.heatmap(vision[None].expand(n, -1, -1), tokens)
        inout = self.heads.inout(tokens)[:, 0]
        pairs, soc = social_logits(self.heads, tokens)
        return heatmaps, inout, pairs, soc

    # -- training -----------------------------------------------------------

    def compute_losses(self, scenes: Sequence[Scene], weights: Optional[LossWeights] = None,
                       task_mode: Optional[str] = None) -> LossReport:
        """Teacher-forced pass over a batch and the weighted multi-task loss."""
        mode = task_mode or self.config.task_mode
        seqs, targets, masks, anchors = [], [], [], []
        for scene in scenes:
            plan = build_prompt(scene, mode, self.tokenizer)
            tg = serialize_targets(scene, mode, self.tokenizer)
            seqs.append(self._embed_scene(scene, plan, tg.token_ids))
            targets.append(tg.token_ids)
            masks.append(tg.mask)
            anchors.append(self._anchors(plan, tg.anchor_offsets))
        out = forward_teacher_forced(self.backbone, seqs, targets)
        T = out.logits.shape[1]
        tgt = torch.zeros(len(scenes), T, dtype=torch.long)
        msk = torch.zeros(len(scenes), T, dtype=self.dtype)
        for b, (t, m) in enumerate(zip(targets, masks)):
            tgt[b, : len(t)] = torch.tensor(t)
            msk[b, : len(m)] = torch.tensor(m, dtype=self.dtype)
        l_lm = loss_lm(out.logits, tgt, msk)

        vision, person_tokens = extract_tokens(out, anchors, self.heads.fallback)
        hm_pred, hm_gt, inside, io_logits, io_labels, soc_logits, soc_labels = [], [], [], [], [], [], []
        side = self.heatmap_side
        for b, scene in enumerate(scenes):
            heatmaps, inout, pairs, soc = self._person_outputs(vision[b], person_tokens[b].tokens)
            for k, p in enumerate(scene.persons):
                hm_pred.append(heatmaps[k])
                if p.gaze_status == "inside":
                    hm_gt.append(render_gaussian(p.targets[0], side, side, self.config.sigma))
                    inside.append(True)
                else:
                    hm_gt.append(np.zeros((side, side)))
                    inside.append(False)
                if p.gaze_status != "unknown":
                    io_logits.append(inout[k])
                    io_labels.append(1.0 if p.gaze_status == "inside" else 0.0)
            for n, (i, j) in enumerate(pairs):
                lab = scene.pair_labels.get((i, j))
                if lab is None or "unknown" in (scene.persons[i].gaze_status, scene.persons[j].gaze_status):
                    continue
                soc_logits.append(soc[n])
                soc_labels.append([float(v) for v in lab.as_tuple()])
        l_hm = heatmap_loss(torch.stack(hm_pred), torch.tensor(np.stack(hm_gt), dtype=self.dtype),
                            torch.tensor(inside))
        l_io = loss_inout(torch.stack(io_logits), torch.tensor(io_labels)) if io_logits else vision.new_zeros(())
        l_soc = (loss_social(torch.stack(soc_logits), torch.tensor(soc_labels)) if soc_logits
                 else vision.new_zeros(()))
        w = weights or LossWeights()
        return LossReport(l_lm, l_hm, l_io, l_soc, total_loss(l_lm, l_hm, l_io, l_soc, w),
                          counts={"tokens": int(msk.sum()), "inside": int(sum(inside)),
                                  "inout": len(io_logits), "pairs": len(soc_logits)})

    # -- inference ----------------------------------------------------------

    @torch.no_grad()
    def teacher_forced_heatmaps(self, scene: Scene, task_mode: Optional[str] = None) -> np.ndarray:
        """Heatmaps read at the ground-truth anchors of the target text (N x H' x W')."""
        mode = task_mode or self.config.task_mode
        plan = build_prompt(scene, mode, self.tokenizer)
        tg = serialize_targets(scene, mode, self.tokenizer)
        out = forward_teacher_forced(self.backbone, [self._embed_scene(scene, plan, tg.token_ids)], [tg.token_ids])
        vision, tokens = extract_tokens(out, [self._anchors(plan, tg.anchor_offsets)], self.heads.fallback)
        return self._person_outputs(vision[0], tokens[0].tokens)[0].float().cpu().numpy()

    @torch.no_grad()
    def predict(self, scene: Scene, task_mode: Optional[str] = None) -> ScenePrediction:
        mode = task_mode or self.config.task_mode
        plan = build_prompt(scene, mode, self.tokenizer)
        seq = self._embed_scene(scene, plan)
        out = generate(self.backbone, seq, self.config.max_new_tokens, self.tokenizer.eos_id)
        ids = out.generated_ids[0]
        records: List[PersonOutputRecord] = align_records(
            parse_output(ids, self.tokenizer, start=len(seq)), len(scene.persons))
        if self.config.anchor == "prompt":
            anchors = [self._anchors(plan, [])]
        else:
            anchors = [[r.anchor_index if r.valid else None for r in records]]
        vision, person_tokens = extract_tokens(out, anchors, self.heads.fallback)
        heatmaps, inout, pairs, soc = self._person_outputs(vision[0], person_tokens[0].tokens)
        hm = heatmaps.float().cpu().numpy()
        probs = torch.sigmoid(soc).float().cpu().numpy()
        return ScenePrediction(
            points=[heatmap_to_point(m) for m in hm],
            inout_scores=[float(v) for v in torch.sigmoid(inout)],
            status_text=[r.status for r in records],
            categories=[r.category for r in records],
            valid=[r.valid for r in records],
            heatmaps=hm,
            pairs=symmetrize_social(pairs, probs),
            text=self.tokenizer.decode(ids),
            truncated=bool(out.truncated[0]),
        )
