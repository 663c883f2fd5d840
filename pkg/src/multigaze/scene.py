"""Canonical multi-person gaze scenes, a synthetic scene generator and JSONL I/O.

Coordinates: head boxes are absolute pixels ``(x1, y1, x2, y2)``; gaze target
points are normalized to the unit square ``[0, 1]^2``.
"""

from __future__ import annotations

import base64
import colorsys
import io
import json
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

STATUSES = ("inside", "outside", "unknown")

Box = Tuple[float, float, float, float]
Point = Tuple[float, float]


class SceneFormatError(ValueError):
    """Raised for malformed canonical records or benchmark annotation files."""


@dataclass
class SocialLabel:
    lah: bool
    laeo: bool
    sa: bool

    def as_tuple(self) -> Tuple[bool, bool, bool]:
        return (self.lah, self.laeo, self.sa)


@dataclass
class PersonAnnotation:
    head_box: Box
    gaze_status: str
    targets: List[Point] = field(default_factory=list)
    category: Optional[str] = None

    def __post_init__(self):
        x1, y1, x2, y2 = (float(v) for v in self.head_box)
        self.head_box = (x1, y1, x2, y2)
        if not (x1 < x2 and y1 < y2):
            raise SceneFormatError(f"degenerate head box {self.head_box}")
        if self.gaze_status not in STATUSES:
            raise SceneFormatError(f"unknown gaze status {self.gaze_status!r}")
        self.targets = [(float(x), float(y)) for x, y in self.targets]
        if self.gaze_status == "inside" and not self.targets:
            raise SceneFormatError("status 'inside' requires at least one target point")
        if self.gaze_status != "inside" and self.targets:
            raise SceneFormatError(f"status {self.gaze_status!r} must not carry target points")


@dataclass
class Scene:
    """One image with its annotated persons.

    ``image`` is an ``H x W x 3`` float array in ``[0, 1]``. Adapter output may
    leave it unset and point at a file through ``image_ref`` instead; call
    :meth:`load_image` to materialize the raster.
    """

    image: Optional[np.ndarray]
    persons: List[PersonAnnotation]
    pair_labels: Dict[Tuple[int, int], SocialLabel] = field(default_factory=dict)
    scene_id: str = ""
    image_ref: Optional[str] = None
    size: Optional[Tuple[int, int]] = None  # (height, width)
    object_boxes: Optional[List[Optional[Box]]] = None
    meta: Dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image is not None:
            self.image = np.asarray(self.image, dtype=np.float32)
            if self.image.ndim != 3 or self.image.shape[2] != 3:
                raise SceneFormatError(f"image must be H x W x 3, got {self.image.shape}")
            self.size = (int(self.image.shape[0]), int(self.image.shape[1]))
        if self.size is None:
            raise SceneFormatError("scene needs an image raster or an explicit size")
        h, w = self.size
        if h < 1 or w < 1:
            raise SceneFormatError(f"invalid image size {self.size}")
        for p in self.persons:
            p.head_box = clamp_box(p.head_box, w, h)
        n = len(self.persons)
        for (i, j) in self.pair_labels:
            if not (0 <= i < n and 0 <= j < n) or i == j:
                raise SceneFormatError(f"pair index ({i}, {j}) out of range for {n} persons")
        if self.object_boxes is not None and len(self.object_boxes) != n:
            raise SceneFormatError("object_boxes must align with persons")

    @property
    def height(self) -> int:
        return self.size[0]

    @property
    def width(self) -> int:
        return self.size[1]

    def load_image(self, root: Optional[str] = None) -> np.ndarray:
        if self.image is None:
            if self.image_ref is None:
                raise SceneFormatError(f"scene {self.scene_id!r} has no image")
            path = self.image_ref if root is None else os.path.join(root, self.image_ref)
            self.image = read_raster(path)
        return self.image


def clamp_box(box: Box, width: int, height: int) -> Box:
    x1, y1, x2, y2 = box
    x1 = min(max(x1, 0.0), float(width))
    x2 = min(max(x2, 0.0), float(width))
    y1 = min(max(y1, 0.0), float(height))
    y2 = min(max(y2, 0.0), float(height))
    if not (x1 < x2 and y1 < y2):
        raise SceneFormatError(f"head box {box} has no area inside a {width}x{height} image")
    return (x1, y1, x2, y2)


def point_in_box(point: Point, box: Box) -> bool:
    x, y = point
    return box[0] <= x <= box[2] and box[1] <= y <= box[3]


# ---------------------------------------------------------------------------
# raster helpers
# ---------------------------------------------------------------------------

def read_raster(path: str) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def raster_to_png_bytes(image: np.ndarray) -> bytes:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def png_bytes_to_raster(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


# ---------------------------------------------------------------------------
# social labels
# ---------------------------------------------------------------------------

def derive_pair_labels(
    persons: Sequence[PersonAnnotation], width: int, height: int, sa_eps: float = 0.05
) -> Dict[Tuple[int, int], SocialLabel]:
    """Labels for every ordered pair whose members are both annotated.

    LAH(i, j): i's first target lies in j's head box. LAEO is mutual LAH.
    SA: both targets inside the frame and closer than ``sa_eps`` (normalized).
    """
    labels = {}
    n = len(persons)

    def lah(i, j):
        p = persons[i]
        if p.gaze_status != "inside":
            return False
        x, y = p.targets[0]
        return point_in_box((x * width, y * height), persons[j].head_box)

    for i in range(n):
        for j in range(n):
            if i == j or "unknown" in (persons[i].gaze_status, persons[j].gaze_status):
                continue
            a, b = persons[i], persons[j]
            sa = False
            if a.gaze_status == "inside" and b.gaze_status == "inside":
                ta, tb = a.targets[0], b.targets[0]
                sa = math.hypot(ta[0] - tb[0], ta[1] - tb[1]) < sa_eps
            labels[(i, j)] = SocialLabel(lah=lah(i, j), laeo=lah(i, j) and lah(j, i), sa=sa)
    return labels


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

DEFAULT_PALETTE = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.2),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.9, 0.1),
    "white": (1.0, 1.0, 1.0),
    "purple": (0.6, 0.15, 0.75),
}


@dataclass
class SynthConfig:
    """Knobs for :func:`generate_synthetic_scene`. Distances are fractions of the
    longer image side; sizes are pixels."""

    width: int = 224
    height: int = 224
    min_persons: int = 1
    max_persons: int = 3
    head_size: int = 24
    border: int = 4
    marker_size: int = 8
    min_distance: float = 0.2
    max_distance: float = 0.7
    p_outside: float = 0.2
    p_look_at_person: float = 0.15
    p_mutual: float = 0.15
    p_shared: float = 0.2
    p_unknown: float = 0.0
    sa_eps: float = 0.05
    with_categories: bool = True
    background: float = 0.1
    palette: Dict[str, Tuple[float, float, float]] = field(
        default_factory=lambda: dict(DEFAULT_PALETTE)
    )

    def validate(self):
        if self.head_size >= min(self.width, self.height):
            raise ValueError(
                f"head size {self.head_size} does not fit a {self.width}x{self.height} image"
            )
        if not 1 <= self.min_persons <= self.max_persons:
            raise ValueError("need 1 <= min_persons <= max_persons")
        if 2 * self.border >= self.head_size:
            raise ValueError("border too wide for head size")
        if self.with_categories and not self.palette:
            raise ValueError("category palette is empty")


def direction_to_rgb(theta: float) -> Tuple[float, float, float]:
    hue = (theta % (2 * math.pi)) / (2 * math.pi)
    return colorsys.hsv_to_rgb(hue, 1.0, 1.0)


def rgb_to_direction(rgb: Sequence[float]) -> float:
    hue, _, _ = colorsys.rgb_to_hsv(*(float(c) for c in rgb))
    return hue * 2 * math.pi


def decode_head_direction(image: np.ndarray, box: Box, border: int) -> float:
    """Gaze angle (radians) read back from the mean color of a head's border ring."""
    x1, y1, x2, y2 = (int(round(v)) for v in box)
    patch = np.asarray(image[y1:y2, x1:x2], dtype=np.float64)
    ring = np.ones(patch.shape[:2], dtype=bool)
    ring[border:-border, border:-border] = False
    return rgb_to_direction(patch[ring].mean(axis=0))


def _ray_exit(cx, cy, theta, width, height):
    dx, dy = math.cos(theta), math.sin(theta)
    ts = []
    if dx > 1e-12:
        ts.append((width - cx) / dx)
    elif dx < -1e-12:
        ts.append(-cx / dx)
    if dy > 1e-12:
        ts.append((height - cy) / dy)
    elif dy < -1e-12:
        ts.append(-cy / dy)
    return min(ts)


def _place_heads(rng, n, cfg):
    hs, gap = cfg.head_size, cfg.marker_size
    boxes = []
    for _ in range(2000):
        if len(boxes) == n:
            break
        x1 = int(rng.integers(0, cfg.width - hs + 1))
        y1 = int(rng.integers(0, cfg.height - hs + 1))
        cand = (x1, y1, x1 + hs, y1 + hs)
        if all(
            cand[2] + gap <= b[0] or b[2] + gap <= cand[0] or cand[3] + gap <= b[1] or b[3] + gap <= cand[1]
            for b in boxes
        ):
            boxes.append(cand)
    return boxes


def generate_synthetic_scene(seed: int, config: Optional[SynthConfig] = None) -> Scene:
    """Render a deterministic scene whose labels are recoverable from its pixels.

    Each head is a gray block framed by a ring whose hue encodes the gaze angle.
    In-frame targets that do not hit another head get a small square marker in a
    palette color that names the category; a target on another head is a
    ``person``. The pair labels are re-derived from the stored geometry.
    """
    cfg = config or SynthConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    W, H = cfg.width, cfg.height
    scale = max(W, H)
    n = int(rng.integers(cfg.min_persons, cfg.max_persons + 1))
    boxes = _place_heads(rng, n, cfg)
    n = len(boxes)
    centers = [((b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0) for b in boxes]

    angles: List[Optional[float]] = [None] * n
    targets_px: List[Optional[Point]] = [None] * n
    modes = [""] * n

    def aim(i, pt):
        cx, cy = centers[i]
        angles[i] = math.atan2(pt[1] - cy, pt[0] - cx) % (2 * math.pi)
        targets_px[i] = (float(pt[0]), float(pt[1]))

    if n >= 2 and rng.random() < cfg.p_mutual:
        a, b = (int(v) for v in rng.choice(n, size=2, replace=False))
        aim(a, centers[b])
        aim(b, centers[a])
        modes[a] = modes[b] = "mutual"

    for i in range(n):
        if modes[i]:
            continue
        r = rng.random()
        others = [j for j in range(n) if j != i]
        shared = [
            j for j in range(n)
            if j != i and targets_px[j] is not None and not point_in_box(targets_px[j], boxes[i])
        ]
        if others and r < cfg.p_look_at_person:
            j = others[int(rng.integers(len(others)))]
            aim(i, centers[j])
            modes[i] = "person"
        elif shared and r < cfg.p_look_at_person + cfg.p_shared:
            j = shared[int(rng.integers(len(shared)))]
            aim(i, targets_px[j])
            modes[i] = "shared"
        else:
            theta = float(rng.uniform(0.0, 2 * math.pi))
            cx, cy = centers[i]
            t_exit = _ray_exit(cx, cy, theta, W, H)
            d_min, d_max = cfg.min_distance * scale, cfg.max_distance * scale
            room = t_exit - cfg.marker_size
            angles[i] = theta
            if rng.random() < cfg.p_outside or room < d_min:
                modes[i] = "outside"
            else:
                d = float(rng.uniform(d_min, min(d_max, room)))
                targets_px[i] = (cx + d * math.cos(theta), cy + d * math.sin(theta))
                modes[i] = "free"

    unknown = [bool(rng.random() < cfg.p_unknown) for _ in range(n)]
    palette_names = sorted(cfg.palette)
    categories: List[Optional[str]] = [None] * n
    marker_color: Dict[int, Tuple[float, float, float]] = {}
    for i in range(n):
        t = targets_px[i]
        if t is None:
            continue
        if any(point_in_box(t, boxes[j]) for j in range(n) if j != i):
            categories[i] = "person"
            continue
        if modes[i] == "shared":
            src = min(j for j in range(n) if j != i and targets_px[j] == t)
            categories[i] = categories[src]
            continue
        name = palette_names[int(rng.integers(len(palette_names)))]
        categories[i] = name
        marker_color[i] = cfg.palette[name]

    image = np.full((H, W, 3), cfg.background, dtype=np.float64)
    half = cfg.marker_size // 2
    for i, color in marker_color.items():
        tx, ty = targets_px[i]
        cx, cy = int(math.floor(tx)), int(math.floor(ty))
        image[max(cy - half, 0):max(cy + half, 0), max(cx - half, 0):max(cx + half, 0)] = color
    for i, b in enumerate(boxes):
        x1, y1, x2, y2 = b
        image[y1:y2, x1:x2] = direction_to_rgb(angles[i])
        bd = cfg.border
        image[y1 + bd:y2 - bd, x1 + bd:x2 - bd] = 0.5
    image = (np.rint(image * 255.0) / 255.0).astype(np.float32)

    persons = []
    for i in range(n):
        if unknown[i]:
            persons.append(PersonAnnotation(head_box=boxes[i], gaze_status="unknown"))
        elif targets_px[i] is None:
            persons.append(PersonAnnotation(head_box=boxes[i], gaze_status="outside"))
        else:
            tx, ty = targets_px[i]
            persons.append(
                PersonAnnotation(
                    head_box=boxes[i],
                    gaze_status="inside",
                    targets=[(tx / W, ty / H)],
                    category=categories[i] if cfg.with_categories else None,
                )
            )
    pairs = derive_pair_labels(persons, W, H, cfg.sa_eps)
    return Scene(
        image=image,
        persons=persons,
        pair_labels=pairs,
        scene_id=f"synth-{seed:06d}",
        meta={"angles": [float(a) for a in angles], "seed": int(seed)},
    )


# ---------------------------------------------------------------------------
# canonical JSONL
# ---------------------------------------------------------------------------

def _req(obj, key, lineno, where="record"):
    if not isinstance(obj, dict) or key not in obj:
        raise SceneFormatError(f"line {lineno}: missing field '{key}' in {where}")
    return obj[key]


def scene_from_record(rec: dict, lineno: int = 1, root: Optional[str] = None) -> Scene:
    image_field = _req(rec, "image", lineno)
    if not isinstance(image_field, str):
        raise SceneFormatError(f"line {lineno}: field 'image' must be a string")
    image, image_ref = None, None
    if image_field.startswith("data:"):
        try:
            image = png_bytes_to_raster(base64.b64decode(image_field.split(",", 1)[1]))
        except Exception as exc:
            raise SceneFormatError(f"line {lineno}: field 'image' is not a valid inline raster") from exc
    else:
        image_ref = image_field
    persons = []
    raw_persons = _req(rec, "persons", lineno)
    if not isinstance(raw_persons, list):
        raise SceneFormatError(f"line {lineno}: field 'persons' must be a list")
    for k, p in enumerate(raw_persons):
        where = f"persons[{k}]"
        bbox = _req(p, "bbox", lineno, where)
        status = _req(p, "status", lineno, where)
        try:
            persons.append(
                PersonAnnotation(
                    head_box=tuple(float(v) for v in bbox),
                    gaze_status=status,
                    targets=[tuple(pt) for pt in p.get("points") or []],
                    category=p.get("category"),
                )
            )
        except (SceneFormatError, TypeError, ValueError) as exc:
            raise SceneFormatError(f"line {lineno}: field '{where}': {exc}") from exc
    pairs = {}
    for k, pr in enumerate(rec.get("pairs") or []):
        where = f"pairs[{k}]"
        i, j = int(_req(pr, "i", lineno, where)), int(_req(pr, "j", lineno, where))
        if not (0 <= i < len(persons) and 0 <= j < len(persons)) or i == j:
            raise SceneFormatError(
                f"line {lineno}: field '{where}': pair index ({i}, {j}) out of range for {len(persons)} persons"
            )
        pairs[(i, j)] = SocialLabel(
            lah=bool(_req(pr, "lah", lineno, where)),
            laeo=bool(_req(pr, "laeo", lineno, where)),
            sa=bool(_req(pr, "sa", lineno, where)),
        )
    size = rec.get("size")
    if image is None:
        path = image_ref if root is None else os.path.join(root, image_ref)
        if os.path.exists(path):
            image = read_raster(path)
        elif size is None:
            raise SceneFormatError(f"line {lineno}: field 'image': file {path} not found and no 'size' given")
    obj = rec.get("object_boxes")
    try:
        return Scene(
            image=image,
            persons=persons,
            pair_labels=pairs,
            scene_id=str(rec.get("id", "")),
            image_ref=image_ref,
            size=tuple(size) if size is not None and image is None else None,
            object_boxes=[tuple(b) if b is not None else None for b in obj] if obj is not None else None,
            meta=rec.get("meta") or {},
        )
    except SceneFormatError as exc:
        raise SceneFormatError(f"line {lineno}: {exc}") from exc


def scene_to_record(scene: Scene, image_field: str) -> dict:
    rec = {
        "id": scene.scene_id,
        "image": image_field,
        "size": [scene.height, scene.width],
        "persons": [
            {
                "bbox": list(p.head_box),
                "status": p.gaze_status,
                "points": [list(t) for t in p.targets],
                "category": p.category,
            }
            for p in scene.persons
        ],
        "pairs": [
            {"i": i, "j": j, "lah": lab.lah, "laeo": lab.laeo, "sa": lab.sa}
            for (i, j), lab in sorted(scene.pair_labels.items())
        ],
    }
    if scene.object_boxes is not None:
        rec["object_boxes"] = [list(b) if b is not None else None for b in scene.object_boxes]
    if scene.meta:
        rec["meta"] = scene.meta
    return rec


def save_canonical(scenes: Sequence[Scene], path: str, inline: bool = False) -> None:
    """Write scenes as canonical JSONL.

    Rasters are stored inline as base-64 PNG when ``inline`` is set, otherwise as
    ``images/<id>.png`` next to the JSONL file. Scenes that only reference an
    image file keep their reference.
    """
    root = os.path.dirname(os.path.abspath(path))
    lines = []
    for k, scene in enumerate(scenes):
        if scene.image is None:
            image_field = scene.image_ref
        elif inline:
            image_field = "data:image/png;base64," + base64.b64encode(raster_to_png_bytes(scene.image)).decode("ascii")
        else:
            if scene.image_ref and not os.path.isabs(scene.image_ref) and scene.image_ref.endswith(".png"):
                image_field = scene.image_ref
            else:
                image_field = f"images/{scene.scene_id or f'scene-{k:06d}'}.png"
            os.makedirs(os.path.dirname(os.path.join(root, image_field)), exist_ok=True)
            with open(os.path.join(root, image_field), "wb") as fh:
                fh.write(raster_to_png_bytes(scene.image))
        lines.append(json.dumps(scene_to_record(scene, image_field)))
    with open(path, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line + "\n")


def load_canonical(path: str) -> List[Scene]:
    root = os.path.dirname(os.path.abspath(path))
    scenes = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SceneFormatError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            scenes.append(scene_from_record(rec, lineno, root))
    return scenes
