"""Readers that turn benchmark-style annotation tables into canonical scenes.

Each layout is a CSV file with a header row. The column names below are the
contract; extra columns are ignored. Head boxes are absolute pixels, gaze
points are normalized to [0, 1] unless stated otherwise.

gazefollow
    path, width, height, head_x1, head_y1, head_x2, head_y2, gaze_x, gaze_y
    Optional ``inout`` (1 inside, 0 outside). Rows sharing path and head box
    are annotators of one person, so their points are collected together.
videoattentiontarget
    frame, width, height, track, head_x1, head_y1, head_x2, head_y2, gaze_x, gaze_y
    Gaze in pixels; ``-1 -1`` marks a target outside the frame.
childplay
    Same columns as videoattentiontarget plus ``gaze_class``. Classes starting
    with ``inside`` are inside, ``outside`` ones are outside, anything else
    (eyes closed, uncertain) becomes unknown.
gazehoi
    path, width, height, head_x1, head_y1, head_x2, head_y2, gaze_x, gaze_y,
    obj_x1, obj_y1, obj_x2, obj_y2, category
vsgaze
    frame, width, height, track, head_x1, head_y1, head_x2, head_y2, gaze_x, gaze_y
    Optional ``lah_track`` (track id being looked at) and ``sa_group`` (persons
    with the same non-empty group share attention). An empty gaze cell marks a
    track without gaze annotation, which becomes an unknown person; ``-1`` marks
    outside. Person order inside a frame follows file order.
"""

from __future__ import annotations

import csv
import os
from collections import OrderedDict
from typing import Callable, Dict, List, Sequence

from .scene import PersonAnnotation, Scene, SceneFormatError, SocialLabel

HEAD = ("head_x1", "head_y1", "head_x2", "head_y2")
FRAME_COLUMNS = ("frame", "width", "height", "track") + HEAD + ("gaze_x", "gaze_y")

REQUIRED: Dict[str, Sequence[str]] = {
    "gazefollow": ("path", "width", "height") + HEAD + ("gaze_x", "gaze_y"),
    "videoattentiontarget": FRAME_COLUMNS,
    "childplay": FRAME_COLUMNS + ("gaze_class",),
    "gazehoi": ("path", "width", "height") + HEAD + ("gaze_x", "gaze_y", "obj_x1", "obj_y1", "obj_x2", "obj_y2",
                                                     "category"),
    "vsgaze": FRAME_COLUMNS,
}


def _read_rows(path: str, layout: str) -> List[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        for col in REQUIRED[layout]:
            if col not in cols:
                raise SceneFormatError(f"{path}: missing required column {col!r} for layout {layout}")
        return list(reader)


def _num(row: dict, key: str, lineno: int) -> float:
    try:
        return float(row[key])
    except (TypeError, ValueError):
        raise SceneFormatError(f"line {lineno}: column {key!r} is not a number: {row.get(key)!r}") from None


def _box(row, lineno, keys=HEAD):
    return tuple(_num(row, k, lineno) for k in keys)


def _ref(root: str, name: str) -> str:
    return name if os.path.isabs(name) else os.path.join(root, name)


def _group(rows: List[dict], key: str) -> "OrderedDict[str, List[tuple]]":
    groups: "OrderedDict[str, List[tuple]]" = OrderedDict()
    for lineno, row in enumerate(rows, start=2):
        groups.setdefault(row[key], []).append((lineno, row))
    return groups


def _size(row, lineno):
    return int(_num(row, "height", lineno)), int(_num(row, "width", lineno))


def _gazefollow(path: str, with_objects: bool = False) -> List[Scene]:
    layout = "gazehoi" if with_objects else "gazefollow"
    root = os.path.dirname(path)
    scenes = []
    for name, rows in _group(_read_rows(path, layout), "path").items():
        persons: "OrderedDict[tuple, dict]" = OrderedDict()
        for lineno, row in rows:
            box = _box(row, lineno)
            rec = persons.setdefault(box, {"points": [], "inside": True, "obj": None, "cat": None})
            if "inout" in row and row["inout"] not in (None, "") and _num(row, "inout", lineno) <= 0:
                rec["inside"] = False
                continue
            rec["points"].append((_num(row, "gaze_x", lineno), _num(row, "gaze_y", lineno)))
            if with_objects:
                rec["obj"] = _box(row, lineno, ("obj_x1", "obj_y1", "obj_x2", "obj_y2"))
                rec["cat"] = row["category"] or None
        people, objects = [], []
        for box, rec in persons.items():
            if rec["inside"] and rec["points"]:
                people.append(PersonAnnotation(box, "inside", rec["points"], rec["cat"]))
            else:
                people.append(PersonAnnotation(box, "outside"))
            objects.append(rec["obj"])
        scenes.append(Scene(image=None, persons=people, scene_id=name, image_ref=_ref(root, name),
                            size=_size(rows[0][1], rows[0][0]),
                            object_boxes=objects if with_objects else None))
    return scenes


def _frame_status_vat(row, lineno, w, h):
    gx, gy = _num(row, "gaze_x", lineno), _num(row, "gaze_y", lineno)
    if gx < 0 or gy < 0:
        return "outside", []
    return "inside", [(gx / w, gy / h)]


def _frame_status_childplay(row, lineno, w, h):
    cls = row["gaze_class"].strip().lower()
    if cls.startswith("inside"):
        return "inside", [(_num(row, "gaze_x", lineno) / w, _num(row, "gaze_y", lineno) / h)]
    if cls.startswith("outside"):
        return "outside", []
    return "unknown", []


def _frame_status_vsgaze(row, lineno, w, h):
    if row["gaze_x"] in (None, "") or row["gaze_y"] in (None, ""):
        return "unknown", []
    gx, gy = _num(row, "gaze_x", lineno), _num(row, "gaze_y", lineno)
    if gx < 0 or gy < 0:
        return "outside", []
    return "inside", [(gx, gy)]


def _frames(path: str, layout: str, status_fn: Callable, social: bool = False) -> List[Scene]:
    root = os.path.dirname(path)
    scenes = []
    for frame, rows in _group(_read_rows(path, layout), "frame").items():
        h, w = _size(rows[0][1], rows[0][0])
        persons, tracks = [], []
        for lineno, row in rows:
            status, pts = status_fn(row, lineno, w, h)
            persons.append(PersonAnnotation(_box(row, lineno), status, pts))
            tracks.append(row["track"])
        labels = _social_labels(rows, tracks, persons) if social else {}
        scenes.append(Scene(image=None, persons=persons, pair_labels=labels, scene_id=frame,
                            image_ref=_ref(root, frame), size=(h, w)))
    return scenes


def _social_labels(rows, tracks, persons) -> Dict:
    index = {t: k for k, t in enumerate(tracks)}
    looks = {}
    groups = {}
    for k, (_, row) in enumerate(rows):
        tgt = (row.get("lah_track") or "").strip()
        looks[k] = index.get(tgt)
        groups[k] = (row.get("sa_group") or "").strip() or None
    labels = {}
    n = len(persons)
    for i in range(n):
        for j in range(n):
            if i == j or "unknown" in (persons[i].gaze_status, persons[j].gaze_status):
                continue
            lah = looks[i] == j
            laeo = lah and looks[j] == i
            sa = groups[i] is not None and groups[i] == groups[j]
            labels[(i, j)] = SocialLabel(lah, laeo, sa)
    return labels


LAYOUTS = {
    "gazefollow": lambda p: _gazefollow(p),
    "gazehoi": lambda p: _gazefollow(p, with_objects=True),
    "videoattentiontarget": lambda p: _frames(p, "videoattentiontarget", _frame_status_vat),
    "childplay": lambda p: _frames(p, "childplay", _frame_status_childplay),
    "vsgaze": lambda p: _frames(p, "vsgaze", _frame_status_vsgaze, social=True),
}


def adapt_benchmark(layout_name: str, path: str) -> List[Scene]:
    """Read a benchmark annotation table in one of :data:`LAYOUTS` into canonical scenes."""
    if layout_name not in LAYOUTS:
        raise ValueError(f"unknown layout {layout_name!r}; expected one of {sorted(LAYOUTS)}")
    if not os.path.isfile(path):
        raise FileNotFoundError(path)
    return LAYOUTS[layout_name](path)
