"""Structured multi-person prompts, target serialization and output parsing."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

from .scene import PersonAnnotation, Scene
from .tokenizer import EOS, GAZE_PAD, ByteTokenizer, default_tokenizer, system_prompt

TASK_MODES = ("localize", "localize+semantic")
GRID_MAX = 999
_HEADER = re.compile(rb"(?:^|\n)(P(\d+):)")


def to_grid(value: float, extent: float = 1.0) -> int:
    """Scale ``value / extent`` to the integer grid, rounding half up, clamped to [0, 999]."""
    return int(min(max(math.floor(value * 1000.0 / extent + 0.5), 0), GRID_MAX))


def from_grid(value: int) -> float:
    return value / 1000.0


@dataclass
class PromptPlan:
    token_ids: List[int]
    gaze_pad_index: List[int]
    person_slot_spans: List[Tuple[int, int]]
    task_mode: str
    text: str

    def __len__(self):
        return len(self.token_ids)


@dataclass
class PersonOutputRecord:
    person: int
    status: str
    point: Optional[Tuple[float, float]] = None
    grid_point: Optional[Tuple[int, int]] = None
    category: Optional[str] = None
    anchor_index: Optional[int] = None
    valid: bool = True
    error: Optional[str] = None


class SerializedTargets(NamedTuple):
    token_ids: List[int]
    mask: List[float]
    anchor_offsets: List[int]


def _check_mode(task_mode: str) -> None:
    if task_mode not in TASK_MODES:
        raise ValueError(f"task_mode must be one of {TASK_MODES}, got {task_mode!r}")


def person_entry(k: int, person: PersonAnnotation, width: int, height: int) -> str:
    x1, y1, x2, y2 = person.head_box
    box = [to_grid(x1, width), to_grid(y1, height), to_grid(x2, width), to_grid(y2, height)]
    return f"P{k}: {GAZE_PAD} " + json.dumps({"bbox_2d": box})


def build_prompt(scene: Scene, task_mode: str = "localize", tokenizer: Optional[ByteTokenizer] = None) -> PromptPlan:
    _check_mode(task_mode)
    if not scene.persons:
        raise ValueError("cannot build a prompt for a scene without persons")
    tok = tokenizer or default_tokenizer()
    ids = tok.encode(system_prompt(task_mode) + "\n")
    pads, spans = [], []
    for k, person in enumerate(scene.persons):
        start = len(ids)
        ids += tok.encode(person_entry(k, person, scene.width, scene.height) + "\n")
        spans.append((start, len(ids)))
        pads.append(ids.index(tok.gaze_pad_id, start))
    return PromptPlan(token_ids=ids, gaze_pad_index=pads, person_slot_spans=spans,
                      task_mode=task_mode, text=tok.decode(ids))


def record_json(status: str, grid_point: Optional[Tuple[int, int]] = None, category: Optional[str] = None) -> str:
    if status != "inside":
        return json.dumps({"status": "outside"})
    obj = {"status": "inside", "point_2d": [int(grid_point[0]), int(grid_point[1])]}
    if category is not None:
        obj["category"] = category
    return json.dumps(obj)


def target_record(person: PersonAnnotation, task_mode: str) -> str:
    """Ground-truth JSON for one person; unknown persons get the outside dummy."""
    if person.gaze_status == "inside":
        if not person.targets:
            raise ValueError("inside person has no target points")
        x, y = person.targets[0]
        cat = person.category if task_mode == "localize+semantic" else None
        return record_json("inside", (to_grid(x), to_grid(y)), cat)
    return record_json("outside")


def serialize_targets(scene: Scene, task_mode: str = "localize", tokenizer: Optional[ByteTokenizer] = None) -> SerializedTargets:
    """Token ids of the expected output, the per-token loss weight and each person's anchor offset.

    Person ``k`` owns ``P<k>: {...}`` plus its terminator (a newline, or the
    end-of-sequence token for the last person). Every token of an unknown
    person has weight 0.
    """
    _check_mode(task_mode)
    tok = tokenizer or default_tokenizer()
    ids: List[int] = []
    mask: List[float] = []
    anchors: List[int] = []
    n = len(scene.persons)
    for k, person in enumerate(scene.persons):
        seg = tok.encode(f"P{k}: " + target_record(person, task_mode))
        seg.append(tok.eos_id if k == n - 1 else tok.encode("\n")[0])
        anchors.append(len(ids))
        ids += seg
        mask += [0.0 if person.gaze_status == "unknown" else 1.0] * len(seg)
    return SerializedTargets(ids, mask, anchors)


def render_records(records: Sequence[PersonOutputRecord]) -> str:
    return "\n".join(
        f"P{r.person}: " + record_json(r.status, r.grid_point, r.category) for r in records
    )


def _parse_block(raw: bytes) -> dict:
    text = raw.decode("utf-8", errors="replace").replace(EOS, "").strip()
    start = text.find("{")
    if start < 0:
        raise ValueError("no JSON object")
    obj, _ = json.JSONDecoder().raw_decode(text[start:])
    if not isinstance(obj, dict):
        raise ValueError("block is not a JSON object")
    return obj


def _record_from_obj(k: int, obj: dict, anchor: int) -> PersonOutputRecord:
    status = obj.get("status")
    if status == "outside":
        return PersonOutputRecord(person=k, status="outside", anchor_index=anchor)
    if status != "inside":
        raise ValueError(f"bad status {status!r}")
    pt = obj.get("point_2d")
    if not (isinstance(pt, list) and len(pt) == 2 and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in pt)):
        raise ValueError("point_2d must be two numbers")
    gx, gy = int(round(pt[0])), int(round(pt[1]))
    cat = obj.get("category")
    if cat is not None and not isinstance(cat, str):
        raise ValueError("category must be a string")
    return PersonOutputRecord(person=k, status="inside", point=(from_grid(gx), from_grid(gy)),
                              grid_point=(gx, gy), category=cat, anchor_index=anchor)


def parse_output(
    output: Union[str, Sequence[int]],
    tokenizer: Optional[ByteTokenizer] = None,
    start: int = 0,
) -> List[PersonOutputRecord]:
    """Parse generated text (or its token ids) into per-person records.

    ``start`` is the sequence position of the first output token, so that each
    record's ``anchor_index`` addresses the full prompt+output sequence. A block
    that does not parse yields an invalid record with status ``outside``.
    """
    tok = tokenizer or default_tokenizer()
    ids = tok.encode(output) if isinstance(output, str) else [int(t) for t in output]
    offsets, pos = [], 0
    for t in ids:
        offsets.append(pos)
        pos += len(tok.token_bytes(t))
    data = tok.decode_bytes(ids)
    headers = list(_HEADER.finditer(data))
    records = []
    for n, m in enumerate(headers):
        k = int(m.group(2))
        p_pos = m.start(1)
        tok_index = max(i for i, off in enumerate(offsets) if off <= p_pos) if offsets else 0
        anchor = start + tok_index
        end = headers[n + 1].start() if n + 1 < len(headers) else len(data)
        try:
            records.append(_record_from_obj(k, _parse_block(data[m.end(1):end]), anchor))
        except (ValueError, TypeError) as exc:
            records.append(PersonOutputRecord(person=k, status="outside", anchor_index=anchor,
                                              valid=False, error=str(exc)))
    return records


def align_records(records: Sequence[PersonOutputRecord], n_persons: int) -> List[PersonOutputRecord]:
    """One record per expected person, in order; missing or duplicate headers become invalid."""
    by_person = {}
    for r in records:
        if 0 <= r.person < n_persons and r.person not in by_person:
            by_person[r.person] = r
    out = []
    for k in range(n_persons):
        out.append(by_person.get(k) or PersonOutputRecord(
            person=k, status="outside", valid=False, error="missing from output"))
    return out
