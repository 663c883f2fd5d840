"""Evaluation protocols: distances, in/out AP, social F1/AP, GazeAcc and semantic accuracy."""

from __future__ import annotations

import hashlib
import json
import math
import re
from typing import Callable, Dict, Iterable, List, Optional, Protocol, Sequence, Tuple

import jsonschema
import numpy as np

from .scene import Scene

SQRT2 = math.sqrt(2.0)


def l2_distances(pred: Sequence[float], gts: Sequence[Sequence[float]]) -> Tuple[float, float]:
    """(mean, min) Euclidean distance from ``pred`` to each annotator point."""
    if len(gts) == 0:
        raise ValueError("no ground-truth points")
    d = [math.hypot(pred[0] - g[0], pred[1] - g[1]) for g in gts]
    return float(np.mean(d)), float(min(d))


def average_precision(scores: Sequence[float], labels: Sequence[int]) -> Optional[float]:
    """Sum over ranks of recall increase times precision, ranking by descending score.

    Tied scores keep their input order. Returns ``None`` when there is no
    positive label.
    """
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    if n_pos == 0:
        return None
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    hits = labels[order]
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, len(hits) + 1)
    return float(precision[hits].sum() / n_pos)


def f1_at_threshold(scores: Sequence[float], labels: Sequence[int], threshold: float = 0.5) -> float:
    """F1 of ``score >= threshold`` against the labels; 0 when precision + recall is 0."""
    pred = np.asarray(scores, dtype=np.float64) >= threshold
    lab = np.asarray(labels, dtype=bool)
    tp = int((pred & lab).sum())
    fp = int((pred & ~lab).sum())
    fn = int((~pred & lab).sum())
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return 2 * p * r / (p + r) if p + r else 0.0


def gaze_acc(point: Sequence[float], box: Sequence[float]) -> int:
    x, y = point
    return int(box[0] <= x <= box[2] and box[1] <= y <= box[3])


# ---------------------------------------------------------------------------
# semantic matching
# ---------------------------------------------------------------------------

class TextEmbedder(Protocol):
    def __call__(self, text: str) -> np.ndarray: ...


class HashingEmbedder:
    """Deterministic unit-norm bag of hashed character n-grams."""

    def __init__(self, dim: int = 512, ngrams: Sequence[int] = (2, 3, 4)):
        self.dim = dim
        self.ngrams = tuple(ngrams)
        self._cache: Dict[str, np.ndarray] = {}

    def __call__(self, text: str) -> np.ndarray:
        if text in self._cache:
            return self._cache[text]
        s = f" {text.lower().strip()} "
        v = np.zeros(self.dim)
        for n in self.ngrams:
            for k in range(len(s) - n + 1):
                h = hashlib.blake2b(s[k:k + n].encode("utf-8"), digest_size=8).digest()
                idx = int.from_bytes(h[:4], "little") % self.dim
                v[idx] += 1.0 if h[4] & 1 else -1.0
        norm = np.linalg.norm(v)
        v = v / norm if norm > 0 else v
        self._cache[text] = v
        return v


class TemplateEmbedder:
    """Wraps an external text encoder, embedding ``template.format(label)`` and normalizing."""

    def __init__(self, encode: Callable[[str], Sequence[float]], template: str = "a photo of {}"):
        self.encode = encode
        self.template = template

    def __call__(self, text: str) -> np.ndarray:
        v = np.asarray(self.encode(self.template.format(text)), dtype=np.float64)
        return v / np.linalg.norm(v)


def semantic_match(pred: Optional[str], vocabulary: Sequence[str], embedder: Optional[TextEmbedder] = None) -> Optional[str]:
    """Closest vocabulary class by cosine similarity; ties go to the lexicographically smallest."""
    if not vocabulary:
        raise ValueError("empty class vocabulary")
    if pred is None or not pred.strip():
        return None
    if pred in vocabulary:
        return pred
    emb = embedder or HashingEmbedder()
    q = emb(pred)
    best, best_sim = None, -math.inf
    for cls in sorted(vocabulary):
        sim = float(np.dot(q, emb(cls)))
        if sim > best_sim:
            best, best_sim = cls, sim
    return best


def label_set(category: Optional[str]) -> List[str]:
    """Ground-truth labels of one person; multiple labels are separated by ``|``."""
    if not category:
        return []
    return [c.strip() for c in category.split("|") if c.strip()]


# ---------------------------------------------------------------------------
# prediction file
# ---------------------------------------------------------------------------

_NUM = {"type": "number"}
PREDICTION_SCHEMA = {
    "type": "object",
    "required": ["scene_id", "persons", "pairs"],
    "properties": {
        "scene_id": {"type": "string"},
        "persons": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["point", "inout_score", "status_text", "category", "valid"],
                "properties": {
                    "point": {"oneOf": [{"type": "null"},
                                        {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}]},
                    "inout_score": _NUM,
                    "status_text": {"type": "string"},
                    "category": {"type": ["string", "null"]},
                    "valid": {"type": "boolean"},
                },
            },
        },
        "pairs": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["i", "j", "lah", "laeo", "sa"],
                "properties": {"i": {"type": "integer"}, "j": {"type": "integer"},
                               "lah": _NUM, "laeo": _NUM, "sa": _NUM},
            },
        },
    },
}


def validate_prediction(rec: dict) -> None:
    jsonschema.validate(rec, PREDICTION_SCHEMA)
    scores = [p["inout_score"] for p in rec["persons"]]
    scores += [pr[k] for pr in rec["pairs"] for k in ("lah", "laeo", "sa")]
    if not all(math.isfinite(s) for s in scores):
        raise ValueError(f"scene {rec['scene_id']}: non-finite score")


def prediction_record(scene_id: str, pred) -> dict:
    """Prediction-file entry for one :class:`~multigaze.pipeline.ScenePrediction`."""
    return {
        "scene_id": scene_id,
        "persons": [
            {"point": list(pt) if pt is not None else None, "inout_score": s, "status_text": st,
             "category": c, "valid": v}
            for pt, s, st, c, v in zip(pred.points, pred.inout_scores, pred.status_text, pred.categories, pred.valid)
        ],
        "pairs": [{"i": i, "j": j, "lah": v[0], "laeo": v[1], "sa": v[2]} for (i, j), v in sorted(pred.pairs.items())],
    }


def write_predictions(records: Iterable[dict], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            validate_prediction(rec)
            fh.write(json.dumps(rec) + "\n")


def read_predictions(path: str) -> List[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                validate_prediction(rec)
                out.append(rec)
    return out


# ---------------------------------------------------------------------------
# aggregate evaluation
# ---------------------------------------------------------------------------

def evaluate_predictions(predictions: Sequence[dict], scenes: Sequence[Scene],
                         tasks: Sequence[str] = ("gaze",), vocabulary: Optional[Sequence[str]] = None,
                         embedder: Optional[TextEmbedder] = None) -> Dict[str, float]:
    """Metric report keyed by metric name. Ground-truth persons with status unknown are skipped."""
    by_id = {p["scene_id"]: p for p in predictions}
    report: Dict[str, float] = {}
    avg_d, min_d, io_scores, io_labels, hits = [], [], [], [], []
    sem_pred, sem_gt = [], []
    soc = {"lah": ([], []), "laeo": ([], []), "sa": ([], [])}
    for scene in scenes:
        pred = by_id.get(scene.scene_id)
        if pred is None:
            raise KeyError(f"no prediction for scene {scene.scene_id!r}")
        if len(pred["persons"]) != len(scene.persons):
            raise ValueError(f"scene {scene.scene_id!r}: person count mismatch")
        for k, gt in enumerate(scene.persons):
            pp = pred["persons"][k]
            if gt.gaze_status == "unknown":
                continue
            valid = pp["valid"] and pp["point"] is not None
            io_scores.append(pp["inout_score"] if pp["valid"] else -math.inf)
            io_labels.append(int(gt.gaze_status == "inside"))
            if gt.gaze_status != "inside":
                continue
            if valid:
                a, m = l2_distances(pp["point"], gt.targets)
            else:
                a = m = SQRT2
            avg_d.append(a)
            min_d.append(m)
            if scene.object_boxes is not None and scene.object_boxes[k] is not None:
                x1, y1, x2, y2 = scene.object_boxes[k]
                box = (x1 / scene.width, y1 / scene.height, x2 / scene.width, y2 / scene.height)
                hits.append(gaze_acc(pp["point"], box) if valid else 0)
            if gt.category:
                sem_pred.append(pp["category"] if pp["valid"] else None)
                sem_gt.append(label_set(gt.category))
        if scene.pair_labels:
            pairs = {(p["i"], p["j"]): p for p in pred["pairs"]}
            for (i, j), lab in sorted(scene.pair_labels.items()):
                if "unknown" in (scene.persons[i].gaze_status, scene.persons[j].gaze_status):
                    continue
                pr = pairs.get((i, j))
                if pr is None:
                    continue
                soc["lah"][0].append(pr["lah"])
                soc["lah"][1].append(int(lab.lah))
                if i < j:
                    soc["laeo"][0].append(pr["laeo"])
                    soc["laeo"][1].append(int(lab.laeo))
                    soc["sa"][0].append(pr["sa"])
                    soc["sa"][1].append(int(lab.sa))

    if "gaze" in tasks:
        if avg_d:
            report["avg_dist"] = float(np.mean(avg_d))
            report["min_dist"] = float(np.mean(min_d))
        ap = average_precision(io_scores, io_labels) if io_labels else None
        if ap is not None:
            report["inout_ap"] = ap
        if hits:
            report["gaze_acc"] = float(np.mean(hits))
    if "semantic" in tasks and sem_gt:
        vocab = sorted(set(vocabulary) if vocabulary else {c for s in sem_gt for c in s})
        emb = embedder or HashingEmbedder()
        matched = [semantic_match(p, vocab, emb) for p in sem_pred]
        report["acc@1"] = float(np.mean([m is not None and m == g[0] for m, g in zip(matched, sem_gt)]))
        report["multiacc@1"] = float(np.mean([m is not None and m in g for m, g in zip(matched, sem_gt)]))
    if "social" in tasks and soc["lah"][1]:
        report["f1_lah"] = f1_at_threshold(*soc["lah"])
        report["f1_laeo"] = f1_at_threshold(*soc["laeo"])
        ap_sa = average_precision(*soc["sa"])
        if ap_sa is not None:
            report["ap_sa"] = ap_sa
        for name in ("lah", "laeo"):
            ap = average_precision(*soc[name])
            if ap is not None:
                report[f"ap_{name}"] = ap
    return report


def evaluate_model(model, scenes: Sequence[Scene], tasks: Sequence[str] = ("gaze",), **kw):
    """Run inference on every scene and score it. Returns (metrics, prediction records)."""
    mode = "localize+semantic" if "semantic" in tasks else model.config.task_mode
    model.eval()
    records = []
    for k, scene in enumerate(scenes):
        sid = scene.scene_id or f"scene-{k:06d}"
        if not scene.scene_id:
            scene.scene_id = sid
        records.append(prediction_record(sid, model.predict(scene, mode)))
    return evaluate_predictions(records, scenes, tasks, **kw), records
