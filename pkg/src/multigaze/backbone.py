"""A small causal multimodal transformer with low-rank adapters.

The rest of the package talks to a backbone only through four hooks:
``embed_text`` (token embedding access), the injection point between embedding
and ``forward_embeddings`` (placeholder overwrite), the final-layer states
returned by ``forward_embeddings``, and ``lm_logits`` (used by generation).
:class:`BackboneShim` spells this out so a large pretrained model can be
wrapped behind the same surface.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Protocol, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .prompts import PromptPlan

VISION, TEXT, PLACEHOLDER = 0, 1, 2


@dataclass
class BackboneConfig:
    hidden_dim: int = 128
    n_layers: int = 4
    n_heads: int = 4
    vocab_size: int = 355
    patch_size: int = 14
    image_side: int = 224
    max_text_len: int = 768
    mlp_ratio: int = 4
    lora_rank: int = 16
    lora_alpha: float = 32.0
    lora_targets: Tuple[str, ...] = ("q_proj", "k_proj", "v_proj", "o_proj")
    init_seed: int = 0

    def __post_init__(self):
        self.lora_targets = tuple(self.lora_targets)
        if self.image_side % self.patch_size:
            raise ValueError(f"image side {self.image_side} not divisible by patch size {self.patch_size}")
        if self.hidden_dim % self.n_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by {self.n_heads} heads")
        if self.lora_rank < 1:
            raise ValueError("lora_rank must be >= 1")

    @property
    def grid_side(self) -> int:
        return self.image_side // self.patch_size

    @property
    def num_vision_tokens(self) -> int:
        return self.grid_side ** 2

    @property
    def max_len(self) -> int:
        return self.num_vision_tokens + self.max_text_len

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lora_targets"] = list(self.lora_targets)
        return d

    @classmethod
    def full_scale(cls, **overrides) -> "BackboneConfig":
        """Scene side 448 and LoRA r=16, alpha=32 of the full-size setup; other sizes stay desk-scale."""
        base = dict(image_side=448, patch_size=28, lora_rank=16, lora_alpha=32.0)
        base.update(overrides)
        return cls(**base)


class LoRALinear(nn.Module):
    """``W x + (alpha / r) * B (A x)`` with ``W`` frozen, ``A`` random and ``B`` zero at init."""

    def __init__(self, base: nn.Linear, rank: int, alpha: float):
        super().__init__()
        d_out, d_in = base.weight.shape
        if rank > min(d_in, d_out):
            raise ValueError(f"rank {rank} exceeds min dimension of a {d_out}x{d_in} projection")
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.rank = rank
        self.scale = alpha / rank
        self.lora_A = nn.Parameter(torch.empty(rank, d_in, dtype=base.weight.dtype))
        self.lora_B = nn.Parameter(torch.zeros(d_out, rank, dtype=base.weight.dtype))
        nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5))

    def forward(self, x):
        return self.base(x) + F.linear(F.linear(x, self.lora_A), self.lora_B) * self.scale


class Attention(nn.Module):
    def __init__(self, dim, n_heads):
        super().__init__()
        self.n_heads = n_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.o_proj = nn.Linear(dim, dim)

    def _split(self, x):
        B, T, D = x.shape
        return x.view(B, T, self.n_heads, D // self.n_heads).transpose(1, 2)

    def forward(self, x, cache: Optional[Tuple[torch.Tensor, torch.Tensor]] = None):
        B, T, D = x.shape
        q, k, v = self._split(self.q_proj(x)), self._split(self.k_proj(x)), self._split(self.v_proj(x))
        if cache is not None:
            k = torch.cat([cache[0], k], dim=2)
            v = torch.cat([cache[1], v], dim=2)
        S = k.shape[2]
        if T == S:
            out = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        elif T == 1:
            out = F.scaled_dot_product_attention(q, k, v)
        else:
            mask = torch.ones(T, S, dtype=torch.bool, device=x.device).tril(diagonal=S - T)
            out = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        out = out.transpose(1, 2).reshape(B, T, D)
        return self.o_proj(out), (k, v)


class Block(nn.Module):
    def __init__(self, dim, n_heads, mlp_ratio):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, n_heads)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x, cache=None):
        a, new_cache = self.attn(self.ln1(x), cache)
        x = x + a
        x = x + self.mlp(self.ln2(x))
        return x, new_cache


class BackboneShim(Protocol):
    """What the gaze pipeline may assume about a backbone."""

    config: BackboneConfig

    def embed_vision(self, images: torch.Tensor) -> torch.Tensor: ...

    def embed_text(self, ids: torch.Tensor) -> torch.Tensor: ...

    def forward_embeddings(self, embeds: torch.Tensor, positions: torch.Tensor, cache=None): ...

    def lm_logits(self, hidden: torch.Tensor) -> torch.Tensor: ...


def sincos_grid(side: int, dim: int) -> torch.Tensor:
    """Fixed 2D sine/cosine encoding of a ``side x side`` patch grid, row-major, ``side^2 x dim``."""
    quarter = dim // 4
    freqs = 1.0 / (side ** (torch.arange(quarter, dtype=torch.float64) / quarter))
    coords = torch.arange(side, dtype=torch.float64)
    ang = coords[:, None] * freqs[None] * math.pi / 2
    enc1d = torch.cat([ang.sin(), ang.cos()], dim=1)  # side x dim/2
    ys, xs = torch.meshgrid(coords.long(), coords.long(), indexing="ij")
    enc = torch.cat([enc1d[xs.flatten()], enc1d[ys.flatten()]], dim=1)
    if enc.shape[1] < dim:
        enc = torch.cat([enc, enc.new_zeros(enc.shape[0], dim - enc.shape[1])], dim=1)
    return enc.float()


class TinyVLM(nn.Module):
    """Reference backbone: patch-embedding vision tokenizer, token embeddings,
    a pre-norm causal decoder stack and an untied LM head."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        D = config.hidden_dim
        gen = torch.random.fork_rng(devices=[])
        with gen:
            torch.manual_seed(config.init_seed)
            self.patch_embed = nn.Conv2d(3, D, config.patch_size, stride=config.patch_size)
            self.tok_embed = nn.Embedding(config.vocab_size, D)
            self.pos_embed = nn.Embedding(config.max_len, D)
            self.blocks = nn.ModuleList(Block(D, config.n_heads, config.mlp_ratio) for _ in range(config.n_layers))
            self.ln_f = nn.LayerNorm(D)
            self.lm_head = nn.Linear(D, config.vocab_size, bias=False)
            nn.init.normal_(self.tok_embed.weight, std=0.02)
            nn.init.normal_(self.pos_embed.weight, std=0.02)
        self.register_buffer("grid_pos", sincos_grid(config.grid_side, D), persistent=False)

    def embed_vision(self, images):
        x = self.patch_embed((images - 0.5) / 0.25)
        return x.flatten(2).transpose(1, 2) + self.grid_pos.to(x.dtype)

    def embed_text(self, ids):
        return self.tok_embed(ids)

    def forward_embeddings(self, embeds, positions, cache=None):
        x = embeds + self.pos_embed(positions)
        new_cache = []
        for i, block in enumerate(self.blocks):
            x, c = block(x, None if cache is None else cache[i])
            new_cache.append(c)
        return self.ln_f(x), new_cache

    def lm_logits(self, hidden):
        return self.lm_head(hidden)


def apply_low_rank_adapters(model: nn.Module, rank: int, alpha: float,
                            targets: Sequence[str] = ("q_proj", "k_proj", "v_proj", "o_proj")) -> nn.Module:
    """Freeze every parameter of ``model`` and wrap the target projections in :class:`LoRALinear`."""
    for p in model.parameters():
        p.requires_grad_(False)
    for module in list(model.modules()):
        for name, child in list(module.named_children()):
            if name in targets and isinstance(child, nn.Linear):
                setattr(module, name, LoRALinear(child, rank, alpha))
    return model


def adapter_parameters(model: nn.Module) -> List[nn.Parameter]:
    return [p for n, p in model.named_parameters() if "lora_" in n]


def build_backbone(config: BackboneConfig, adapters: bool = True) -> TinyVLM:
    model = TinyVLM(config)
    if adapters:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.init_seed + 1)
            apply_low_rank_adapters(model, config.lora_rank, config.lora_alpha, config.lora_targets)
    return model


# ---------------------------------------------------------------------------
# sequences
# ---------------------------------------------------------------------------

@dataclass
class EmbeddedSequence:
    """``H^(0)`` for one example: vision tokens followed by text tokens."""

    embeddings: torch.Tensor  # L x D
    modality: torch.Tensor  # L, VISION / TEXT / PLACEHOLDER
    positions: torch.Tensor  # L
    num_vision: int
    token_ids: List[int] = field(default_factory=list)

    def __len__(self):
        return self.embeddings.shape[0]

    def replace(self, embeddings: torch.Tensor) -> "EmbeddedSequence":
        return EmbeddedSequence(embeddings, self.modality, self.positions, self.num_vision, self.token_ids)


@dataclass
class BackboneOutput:
    hidden: torch.Tensor  # B x L' x D final-layer states (after the final norm)
    num_vision: int
    lengths: List[int]
    logits: Optional[torch.Tensor] = None  # B x T x K at supervised positions
    target_lengths: Optional[List[int]] = None
    generated_ids: Optional[List[List[int]]] = None
    prompt_lengths: Optional[List[int]] = None
    truncated: Optional[List[bool]] = None

    @property
    def vision(self) -> torch.Tensor:
        return self.hidden[:, : self.num_vision]


def prepare_image(image: np.ndarray, side: int) -> torch.Tensor:
    """H x W x 3 array in [0, 1] -> 3 x side x side tensor."""
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)
    if t.shape[1] != side or t.shape[2] != side:
        t = F.interpolate(t[None], size=(side, side), mode="bilinear", align_corners=False, antialias=True)[0]
    return t


def embed(model: BackboneShim, image: torch.Tensor, plan: PromptPlan,
          extra_ids: Sequence[int] = (), gaze_pad_id: Optional[int] = None) -> EmbeddedSequence:
    """Embed one image and the prompt (optionally followed by teacher-forcing ids)."""
    cfg = model.config
    ids = list(plan.token_ids) + list(extra_ids)
    V = cfg.num_vision_tokens
    if V + len(ids) > cfg.max_len:
        raise ValueError(f"sequence of {V + len(ids)} positions exceeds the context limit {cfg.max_len}")
    dtype = next(model.parameters()).dtype
    vis = model.embed_vision(image[None].to(dtype))[0]
    id_t = torch.tensor(ids, dtype=torch.long)
    txt = model.embed_text(id_t)
    modality = torch.full((V + len(ids),), TEXT, dtype=torch.long)
    modality[:V] = VISION
    pads = torch.tensor(plan.gaze_pad_index, dtype=torch.long) + V
    modality[pads] = PLACEHOLDER
    if gaze_pad_id is not None and not all(ids[g] == gaze_pad_id for g in plan.gaze_pad_index):
        raise ValueError("gaze_pad index does not point at the placeholder token")
    return EmbeddedSequence(
        embeddings=torch.cat([vis, txt], dim=0),
        modality=modality,
        positions=torch.arange(V + len(ids)),
        num_vision=V,
        token_ids=ids,
    )


def collate(seqs: Sequence[EmbeddedSequence]) -> Tuple[torch.Tensor, torch.Tensor, List[int]]:
    """Right-pad a list of sequences. Causal attention means real positions never see padding."""
    lengths = [len(s) for s in seqs]
    L = max(lengths)
    D = seqs[0].embeddings.shape[1]
    emb = seqs[0].embeddings.new_zeros(len(seqs), L, D)
    pos = torch.zeros(len(seqs), L, dtype=torch.long)
    for b, s in enumerate(seqs):
        emb[b, : len(s)] = s.embeddings
        pos[b] = torch.arange(L)
    return emb, pos, lengths


def forward_teacher_forced(model: BackboneShim, seqs: Sequence[EmbeddedSequence],
                           target_ids: Sequence[Sequence[int]]) -> BackboneOutput:
    """One causal pass over ``[vision; prompt; targets]``.

    Each sequence must end with its target ids. Logits are returned for the
    positions that predict those targets (the last prompt position through the
    second-to-last target position).
    """
    for s, t in zip(seqs, target_ids):
        if len(t) == 0 or len(t) >= len(s) - s.num_vision or list(s.token_ids[-len(t):]) != list(t):
            raise ValueError("target ids are not aligned with the end of the embedded sequence")
    if len(seqs) != len(target_ids):
        raise ValueError("one target sequence per embedded sequence is required")
    emb, pos, lengths = collate(seqs)
    hidden, _ = model.forward_embeddings(emb, pos)
    T = max(len(t) for t in target_ids)
    idx = torch.zeros(len(seqs), T, dtype=torch.long)
    for b, (L, t) in enumerate(zip(lengths, target_ids)):
        rows = torch.arange(L - len(t) - 1, L - 1)
        idx[b, : len(t)] = rows
        idx[b, len(t):] = rows[-1]
    gathered = torch.gather(hidden, 1, idx[..., None].expand(-1, -1, hidden.shape[-1]))
    logits = model.lm_logits(gathered)
    return BackboneOutput(hidden=hidden, num_vision=seqs[0].num_vision, lengths=lengths,
                          logits=logits, target_lengths=[len(t) for t in target_ids])


@torch.no_grad()
def generate(model: BackboneShim, seq: EmbeddedSequence, max_new_tokens: int, eos_id: int) -> BackboneOutput:
    """Greedy decoding with a key/value cache for a single sequence.

    The returned states cover the prompt and every generated token (the last
    generated token is fed once more so its state exists too).
    """
    cfg = model.config
    budget = min(max_new_tokens, cfg.max_len - len(seq))
    emb = seq.embeddings[None]
    pos = seq.positions[None]
    hidden, cache = model.forward_embeddings(emb, pos)
    states = [hidden[0]]
    out_ids: List[int] = []
    last = hidden[:, -1:]
    L = len(seq)
    finished = False
    for step in range(budget):
        nxt = int(torch.argmax(model.lm_logits(last)[0, -1]))
        out_ids.append(nxt)
        tok = model.embed_text(torch.tensor([[nxt]]))
        last, cache = model.forward_embeddings(tok, torch.tensor([[L + step]]), cache)
        states.append(last[0])
        if nxt == eos_id:
            finished = True
            break
    hidden_all = torch.cat(states, dim=0)[None]
    return BackboneOutput(hidden=hidden_all, num_vision=seq.num_vision, lengths=[hidden_all.shape[1]],
                          generated_ids=[out_ids], prompt_lengths=[L - seq.num_vision],
                          truncated=[not finished])
