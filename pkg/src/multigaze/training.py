"""Multi-task training loop, checkpoints and the synthetic overfit harness."""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import yaml

from .backbone import adapter_parameters
from .objectives import LossWeights
from .pipeline import GazeModel, ModelConfig
from .scene import Scene, SynthConfig, generate_synthetic_scene, load_canonical

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


def cosine_lr(step: float, total: float, lr_max: float) -> float:
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return 0.5 * lr_max * (1.0 + math.cos(math.pi * step / total))


@dataclass
class TrainConfig:
    batch_size: int = 8
    accumulation: int = 2
    lr_adapter: float = 1e-4
    lr_head: float = 2.5e-4
    weight_decay: float = 0.0
    clip_norm: Optional[float] = 1.0
    total_steps: int = 1000
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    synth: Optional[SynthConfig] = field(default_factory=SynthConfig)
    n_scenes: int = 64
    data_path: Optional[str] = None
    init_from: Optional[str] = None
    resume_from: Optional[str] = None
    train_adapters: bool = True
    train_base: bool = False
    log_path: Optional[str] = None
    checkpoint_path: Optional[str] = None
    float64: bool = False

    def __post_init__(self):
        if self.batch_size < 1 or self.accumulation < 1:
            raise ValueError("batch_size and accumulation must be >= 1")
        if self.lr_adapter <= 0 or self.lr_head <= 0:
            raise ValueError("learning rates must be positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        preset = d.pop("preset", None)
        base = PRESETS[preset].to_dict() if preset else {}
        model = {**base.get("model", {}), **d.pop("model", {})}
        model["backbone"] = {**base.get("model", {}).get("backbone", {}), **model.get("backbone", {})}
        weights = {**base.get("weights", {}), **(d.pop("weights", None) or {})}
        synth = d.pop("synth", base.get("synth", {}))
        merged = {**{k: v for k, v in base.items() if k not in ("model", "weights", "synth")}, **d}
        unknown = set(merged) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(
            model=ModelConfig.from_dict(model),
            weights=LossWeights(**weights),
            synth=SynthConfig(**synth) if synth is not None else None,
            **merged,
        )


def load_config(path: str) -> TrainConfig:
    """Read a flat ``key: value`` config file (nested sections for model/weights/synth)."""
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: config must be a key-value mapping")
    return TrainConfig.from_dict(raw)


def _preset(**kw) -> TrainConfig:
    return TrainConfig(**kw)


PRESETS: Dict[str, TrainConfig] = {
    # base training on a GazeFollow-style corpus
    "base": _preset(),
    # fine-tuning stages started from the base checkpoint
    "finetune_vat": _preset(lr_adapter=2.5e-5, lr_head=2.5e-5),
    "finetune_childplay": _preset(lr_adapter=2.5e-5, lr_head=2.5e-5),
    "finetune_vsgaze": _preset(lr_adapter=1e-4, lr_head=1e-4),
    # desk-scale synthetic memorization run; heatmap and in/out weights raised
    # so that the cell-averaged MSE is not drowned by the LM term
    "overfit": _preset(batch_size=3, accumulation=1, lr_adapter=1e-3, lr_head=3e-4,
                       total_steps=2000, n_scenes=64, train_base=True,
                       weights=LossWeights(hm=100.0, inout=1.0),
                       model=ModelConfig(task_mode="localize+semantic")),
}


# ---------------------------------------------------------------------------
# model / optimizer construction
# ---------------------------------------------------------------------------

def build_model(cfg: TrainConfig) -> GazeModel:
    torch.manual_seed(cfg.seed)
    model = GazeModel(cfg.model)
    if cfg.float64:
        model = model.double()
    for p in model.backbone.parameters():
        p.requires_grad_(False)
    for p in adapter_parameters(model.backbone):
        p.requires_grad_(cfg.train_adapters)
    if cfg.train_base:
        for n, p in model.backbone.named_parameters():
            if "lora_" not in n:
                p.requires_grad_(True)
    return model


def parameter_groups(model: GazeModel, cfg: TrainConfig) -> List[dict]:
    backbone = [p for p in model.backbone.parameters() if p.requires_grad]
    heads = [p for p in list(model.head_encoder.parameters()) + list(model.heads.parameters()) if p.requires_grad]
    groups = [{"name": "heads", "params": heads, "lr_max": cfg.lr_head, "lr": cfg.lr_head}]
    if backbone:
        groups.insert(0, {"name": "adapter", "params": backbone, "lr_max": cfg.lr_adapter, "lr": cfg.lr_adapter})
    return groups


def load_scenes(cfg: TrainConfig) -> List[Scene]:
    if cfg.data_path:
        return load_canonical(cfg.data_path)
    if cfg.synth is None:
        raise ValueError("config needs either data_path or a synth section")
    return [generate_synthetic_scene(cfg.seed * 100003 + k, cfg.synth) for k in range(cfg.n_scenes)]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _split_state(model: GazeModel) -> Dict[str, Dict[str, torch.Tensor]]:
    groups = {"base": {}, "adapters": {}, "heads": {}}
    for name, t in model.state_dict().items():
        if name.startswith("backbone."):
            groups["adapters" if "lora_" in name else "base"][name] = t.detach().clone()
        else:
            groups["heads"][name] = t.detach().clone()
    return groups


def save_checkpoint(path: str, model: GazeModel, optimizer=None, step: int = 0,
                    train_config: Optional[TrainConfig] = None) -> str:
    """Write a versioned checkpoint whose payload is guarded by a SHA-256 digest."""
    payload = {
        "model_config": model.config.to_dict(),
        "train_config": train_config.to_dict() if train_config else None,
        "step": step,
        **_split_state(model),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    data = buf.getvalue()
    digest = hashlib.sha256(data).hexdigest()
    tmp = path + ".tmp"
    torch.save({"version": CHECKPOINT_VERSION, "sha256": digest, "payload": data}, tmp)
    os.replace(tmp, path)
    return digest


def read_checkpoint(path: str) -> dict:
    outer = torch.load(path, map_location="cpu", weights_only=False)
    if outer.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {outer.get('version')}")
    if hashlib.sha256(outer["payload"]).hexdigest() != outer["sha256"]:
        raise ValueError(f"{path}: checkpoint integrity check failed")
    return torch.load(io.BytesIO(outer["payload"]), map_location="cpu", weights_only=False)


def load_model(path: str) -> GazeModel:
    ckpt = read_checkpoint(path)
    model = GazeModel(ModelConfig.from_dict(ckpt["model_config"]))
    state = {**ckpt["base"], **ckpt["adapters"], **ckpt["heads"]}
    first = next(iter(state.values()))
    if first.dtype == torch.float64:
        model = model.double()
    model.load_state_dict(state)
    model.eval()
    return model


def load_matching(model: GazeModel, path: str) -> dict:
    """Copy every tensor whose name and shape match; report everything else."""
    ckpt = read_checkpoint(path)
    src = {**ckpt["base"], **ckpt["adapters"], **ckpt["heads"]}
    own = model.state_dict()
    loaded, mismatched = [], []
    for name, t in src.items():
        if name in own and own[name].shape == t.shape:
            own[name].copy_(t.to(own[name].dtype))
            loaded.append(name)
        elif name in own:
            mismatched.append(f"{name}: {tuple(t.shape)} vs {tuple(own[name].shape)}")
    report = {
        "loaded": len(loaded),
        "shape_mismatch": mismatched,
        "missing": sorted(set(own) - set(src)),
        "unexpected": sorted(set(src) - set(own)),
    }
    if mismatched or report["missing"] or report["unexpected"]:
        log.warning("partial checkpoint load from %s: %s", path, {k: v for k, v in report.items() if k != "loaded"})
    return report


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------

class Trainer:
    """Owns the model, optimizer and step counter for one training run.

    ``step`` counts optimizer updates; each update consumes ``accumulation``
    micro-batches of ``batch_size`` scenes.
    """

    def __init__(self, cfg: TrainConfig, scenes: Sequence[Scene], model: Optional[GazeModel] = None):
        self.cfg = cfg
        self.scenes = list(scenes)
        if not self.scenes:
            raise ValueError("no training scenes")
        self.model = model if model is not None else build_model(cfg)
        self.model.train()
        self.optimizer = torch.optim.AdamW(parameter_groups(self.model, cfg), lr=cfg.lr_head,
                                           weight_decay=cfg.weight_decay)
        self.step = 0
        self.micro = 0
        self._pending: List[dict] = []
        self.incidents: List[dict] = []
        self.history: List[dict] = []
        self.load_report = None
        if cfg.init_from:
            self.load_report = load_matching(self.model, cfg.init_from)
        if cfg.resume_from:
            self.resume(cfg.resume_from)

    def resume(self, path: str) -> None:
        ckpt = read_checkpoint(path)
        self.model.load_state_dict({**ckpt["base"], **ckpt["adapters"], **ckpt["heads"]})
        if ckpt.get("optimizer") is not None:
            self.optimizer.load_state_dict(ckpt["optimizer"])
        self.step = int(ckpt["step"])

    def save(self, path: str) -> str:
        return save_checkpoint(path, self.model, self.optimizer, self.step, self.cfg)

    def set_lr(self) -> float:
        t = min(self.step, self.cfg.total_steps)
        for g in self.optimizer.param_groups:
            g["lr"] = cosine_lr(t, self.cfg.total_steps, g["lr_max"])
        return self.optimizer.param_groups[0]["lr"]

    def batches(self):
        """Endless stream of scene batches from a seeded per-epoch permutation."""
        n, bs = len(self.scenes), self.cfg.batch_size
        epoch = 0
        while True:
            rng = np.random.default_rng(np.random.SeedSequence([self.cfg.seed, epoch]))
            order = rng.permutation(n)
            for k in range(0, n - bs + 1 if n >= bs else 1, bs):
                yield [self.scenes[i] for i in order[k:k + bs]]
            epoch += 1

    def train_step(self, batch: Sequence[Scene]) -> Optional[dict]:
        """One micro-step. Returns the logged record when it completes an update."""
        report = self.model.compute_losses(batch, self.cfg.weights)
        if not torch.isfinite(report.l_total):
            self.optimizer.zero_grad(set_to_none=True)
            self.micro = 0
            self._pending = []
            incident = {"step": self.step, "event": "non-finite loss", **report.as_dict()}
            self.incidents.append(incident)
            log.warning("non-finite loss at step %d; update discarded", self.step)
            return None
        (report.l_total / self.cfg.accumulation).backward()
        self._pending.append(report.as_dict())
        self.micro += 1
        if self.micro < self.cfg.accumulation:
            return None
        lr = self.set_lr()
        if self.cfg.clip_norm:
            torch.nn.utils.clip_grad_norm_([p for g in self.optimizer.param_groups for p in g["params"]],
                                           self.cfg.clip_norm)
        self.optimizer.step()
        self.optimizer.zero_grad(set_to_none=True)
        self.micro = 0
        rec = {"step": self.step}
        for k in self._pending[0]:
            rec[k] = float(np.mean([p[k] for p in self._pending]))
        rec["lr"] = lr
        self._pending = []
        self.step += 1
        self.history.append(rec)
        return rec

    def run(self, steps: Optional[int] = None, log_path: Optional[str] = None) -> List[dict]:
        """Train until ``total_steps`` updates (or ``steps`` more), appending to the JSONL log."""
        target = self.cfg.total_steps if steps is None else min(self.step + steps, self.cfg.total_steps)
        log_path = log_path or self.cfg.log_path
        fh = open(log_path, "a", encoding="utf-8") if log_path else None
        stream = self.batches()
        # skip batches already consumed before a resume so data order is unchanged
        for _ in range(self.step * self.cfg.accumulation):
            next(stream)
        records = []
        try:
            while self.step < target:
                rec = self.train_step(next(stream))
                if rec is not None:
                    records.append(rec)
                    if fh:
                        fh.write(json.dumps(rec) + "\n")
                        fh.flush()
        finally:
            if fh:
                fh.close()
        return records


def overfit_harness(n_scenes: int = 64, budget_steps: int = 2000, seed: int = 0,
                    tasks: Sequence[str] = ("gaze", "semantic", "social"), **overrides) -> dict:
    """Train on ``n_scenes`` synthetic scenes and evaluate on the same scenes."""
    from .metrics import evaluate_model

    cfg = TrainConfig.from_dict({"preset": "overfit", "n_scenes": n_scenes, "total_steps": budget_steps,
                                 "seed": seed, **overrides})
    scenes = load_scenes(cfg)
    trainer = Trainer(cfg, scenes)
    trainer.run()
    trainer.model.eval()
    metrics, _ = evaluate_model(trainer.model, scenes, tasks)
    metrics["final_loss"] = trainer.history[-1]["l_total"] if trainer.history else None
    return metrics


# component ablations: dual-branch against each branch removed
ABLATIONS: Dict[str, dict] = {
    "dual_branch": {},
    # only the gaze branch trains and it reads person tokens from the prompt
    "spatial_only": {"weights": {"lm": 0.0}, "train_adapters": False, "train_base": False,
                     "model": {"anchor": "prompt"}},
    "no_injection": {"model": {"inject": False}},
}


def teacher_forced_distance(model: GazeModel, scenes: Sequence[Scene]) -> float:
    """Mean Avg Dist of in-frame persons with heatmaps read at the ground-truth anchors.

    Used for ablations, where a variant without language supervision cannot be
    scored through its own generated text.
    """
    from .gaze_branch import heatmap_to_point
    from .metrics import l2_distances

    model.eval()
    dists = []
    for scene in scenes:
        heatmaps = model.teacher_forced_heatmaps(scene)
        for k, p in enumerate(scene.persons):
            if p.gaze_status == "inside":
                dists.append(l2_distances(heatmap_to_point(heatmaps[k]), p.targets)[0])
    return float(np.mean(dists))


def ablation_harness(n_scenes: int = 32, budget_steps: int = 800, seed: int = 0,
                     variants: Sequence[str] = tuple(ABLATIONS), **overrides) -> Dict[str, float]:
    """Train each variant under one shared budget; returns teacher-forced Avg Dist per variant."""
    results = {}
    for name in variants:
        extra = ABLATIONS[name]
        d = {"preset": "overfit", "n_scenes": n_scenes, "total_steps": budget_steps, "seed": seed, **overrides}
        for key, val in extra.items():
            d[key] = {**d.get(key, {}), **val} if isinstance(val, dict) else val
        cfg = TrainConfig.from_dict(d)
        scenes = load_scenes(cfg)
        trainer = Trainer(cfg, scenes)
        trainer.run()
        results[name] = teacher_forced_distance(trainer.model, scenes)
    return results
