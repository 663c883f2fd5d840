"""Command-line entry points: ``multigaze {synth,train,eval,predict}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime or numeric error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import List, Optional

import jsonschema
import numpy as np
import torch

from .scene import PersonAnnotation, Scene, SceneFormatError, generate_synthetic_scene, load_canonical, read_raster, \
    save_canonical

EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 1, 2, 3
TASKS = ("gaze", "semantic", "social")

log = logging.getLogger("multigaze")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    try:
        os.makedirs(args.out, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create output directory {args.out}: {e}") from e
    if not os.path.isdir(args.out):
        raise DataError(f"{args.out} is not a directory")
    scenes = [generate_synthetic_scene(args.seed * 100003 + k) for k in range(args.count)]
    path = os.path.join(args.out, "scenes.jsonl")
    save_canonical(scenes, path)
    print(json.dumps({"scenes": len(scenes), "path": path}))
    return 0


def cmd_train(args) -> int:
    from .plotting import plot_losses
    from .training import Trainer, load_config, load_scenes

    if not os.path.isfile(args.config):
        raise DataError(f"config file not found: {args.config}")
    try:
        cfg = load_config(args.config)
    except (ValueError, TypeError, KeyError) as e:
        raise DataError(f"invalid config {args.config}: {e}") from e
    stem = os.path.splitext(args.config)[0]
    cfg.checkpoint_path = cfg.checkpoint_path or stem + ".ckpt"
    cfg.log_path = cfg.log_path or stem + ".log.jsonl"
    scenes = load_scenes(cfg)
    trainer = Trainer(cfg, scenes)
    if trainer.load_report is not None:
        print(json.dumps({"init_from": cfg.init_from, **trainer.load_report}))
    start = trainer.step
    records = trainer.run()
    trainer.save(cfg.checkpoint_path)
    history = _read_log(cfg.log_path)
    fig = os.path.splitext(cfg.log_path)[0] + ".png"
    if history:
        plot_losses(fig, history)
    if any(not np.isfinite(r["l_total"]) for r in records):
        raise FloatingPointError("non-finite loss in training log")
    summary = {"start_step": start, "steps": trainer.step, "checkpoint": cfg.checkpoint_path,
               "log": cfg.log_path, "figure": fig if history else None, "incidents": len(trainer.incidents)}
    if records:
        summary["first_l_total"] = records[0]["l_total"]
        summary["last_l_total"] = records[-1]["l_total"]
    print(json.dumps(summary))
    return 0


def _read_log(path: str) -> List[dict]:
    if not os.path.exists(path):
        return []
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _load_model(path: str):
    from .training import load_model

    if not os.path.isfile(path):
        raise DataError(f"checkpoint not found: {path}")
    try:
        return load_model(path)
    except ValueError as e:
        raise DataError(str(e)) from e


def _parse_tasks(spec: str):
    tasks = tuple(t.strip() for t in spec.split(",") if t.strip())
    bad = [t for t in tasks if t not in TASKS]
    if bad or not tasks:
        raise UsageError(f"unknown tasks {bad}; choose from {', '.join(TASKS)}")
    return tasks


def _load_data(path: str, layout: str) -> List[Scene]:
    if not os.path.isfile(path):
        raise DataError(f"data file not found: {path}")
    if layout == "canonical":
        return load_canonical(path)
    from .adapters import adapt_benchmark

    return adapt_benchmark(layout, path)


def cmd_eval(args) -> int:
    from .metrics import evaluate_model, write_predictions
    from .plotting import plot_metrics

    tasks = _parse_tasks(args.tasks)
    model = _load_model(args.checkpoint)
    scenes = _load_data(args.data, args.layout)
    for s in scenes:
        s.load_image()
    vocab = args.vocabulary.split(",") if args.vocabulary else None
    metrics, records = evaluate_model(model, scenes, tasks, vocabulary=vocab)
    if not all(np.isfinite(v) for v in metrics.values()):
        raise FloatingPointError(f"non-finite metric in {metrics}")
    out = args.out or os.path.splitext(args.data)[0] + ".eval"
    os.makedirs(out, exist_ok=True)
    write_predictions(records, os.path.join(out, "predictions.jsonl"))
    text = json.dumps(metrics, indent=2, sort_keys=True) + "\n"
    with open(os.path.join(out, "metrics.json"), "w", encoding="utf-8") as fh:
        fh.write(text)
    if metrics:
        plot_metrics(os.path.join(out, "metrics.png"), metrics)
    sys.stdout.write(text)
    return 0


def _parse_heads(spec: str) -> List[tuple]:
    if os.path.isfile(spec):
        with open(spec, encoding="utf-8") as fh:
            boxes = json.load(fh)
    else:
        try:
            boxes = [[float(v) for v in part.split(",")] for part in spec.split(";") if part.strip()]
        except ValueError as e:
            raise UsageError(f"--heads expects 'x1,y1,x2,y2;...' or a JSON file: {e}") from e
    if not boxes or any(len(b) != 4 for b in boxes):
        raise UsageError("--heads needs at least one box of four numbers")
    return [tuple(b) for b in boxes]


def cmd_predict(args) -> int:
    from .metrics import prediction_record, validate_prediction
    from .plotting import render_overlay

    model = _load_model(args.checkpoint)
    if not os.path.isfile(args.image):
        raise DataError(f"image not found: {args.image}")
    image = read_raster(args.image)
    h, w = image.shape[:2]
    persons = []
    for box in _parse_heads(args.heads):
        x1, y1, x2, y2 = box
        clamped = (min(max(x1, 0), w), min(max(y1, 0), h), min(max(x2, 0), w), min(max(y2, 0), h))
        if clamped != box:
            log.warning("head box %s clamped to image bounds %s", box, clamped)
        try:
            persons.append(PersonAnnotation(clamped, "outside"))
        except SceneFormatError as e:
            raise DataError(f"head box {box} lies outside the image") from e
    scene = Scene(image=image, persons=persons, scene_id=os.path.basename(args.image))
    pred = model.predict(scene, args.task_mode)
    rec = prediction_record(scene.scene_id, pred)
    validate_prediction(rec)
    line = json.dumps(rec)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(line + "\n")
    print(line)
    if args.visualize_out:
        os.makedirs(args.visualize_out, exist_ok=True)
        for k, p in enumerate(scene.persons):
            label = f"P{k} {pred.status_text[k]} in={pred.inout_scores[k]:.2f}"
            if pred.categories[k]:
                label += f" {pred.categories[k]}"
            render_overlay(os.path.join(args.visualize_out, f"person_{k}.png"), image, pred.heatmaps[k],
                           pred.points[k], head_box=p.head_box, title=label)
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="multigaze", description="Multi-person gaze following toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write synthetic scenes as canonical JSONL")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train from a YAML config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--tasks", default="gaze", help="comma list of gaze, semantic, social")
    p.add_argument("--layout", default="canonical",
                   choices=["canonical", "gazefollow", "videoattentiontarget", "childplay", "gazehoi", "vsgaze"])
    p.add_argument("--vocabulary", default=None, help="comma-separated class list for semantic matching")
    p.add_argument("--out", default=None, help="output directory for metrics, predictions and figures")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="run a checkpoint on one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--heads", required=True, help="'x1,y1,x2,y2;...' in pixels, or a JSON file of boxes")
    p.add_argument("--task-mode", default=None, choices=["localize", "localize+semantic"])
    p.add_argument("--visualize-out", default=None, help="directory for per-person overlay PNGs")
    p.add_argument("--out", default=None, help="also write the prediction record to this file")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, SceneFormatError, FileNotFoundError, jsonschema.ValidationError, json.JSONDecodeError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, RuntimeError, torch.cuda.OutOfMemoryError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
