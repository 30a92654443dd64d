"""Command-line entry point: ``sketchyseg <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .config import ConfigError, dump, parse_assignments, resolve
from .diffcore import save_checkpoint
from .features import raw_descriptor
from .geometry import InstanceMask
from .labeler import LabelerConfig, build_context, generate_pseudo_labels, partition_points
from .metrics import evaluate, gt_instances, report_csv_rows
from .perturbation import PerturbParams, Preset, apply_preset
from .scenes import GeneratedScene, PlacementFailed, generate_scene
from .training import (SWEEP_AXES, SWEEP_HEADER, DivergedTraining, detect, load_model, prepare,
                       split_corpus, sweep, train, write_rows)

log = logging.getLogger("sketchyseg")


# ---------------------------------------------------------------- helpers

def _configs(args):
    overrides = parse_assignments(args.set or [])
    for flag in ("seed", "iters", "preset", "mode", "lr", "q", "n_blocks", "attention"):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[flag if flag != "iters" else "train.iters"] = str(value)
    return resolve(args.config, overrides)


def _scene_files(data_dir) -> list[Path]:
    files = sorted(Path(data_dir).glob("scene_*.jsonl"))
    if not files:
        raise SystemExit(f"no scene_*.jsonl files in {data_dir}")
    return files


def _boxes_path(scene_path: Path) -> Path:
    return scene_path.with_name(scene_path.name.replace(".jsonl", ".boxes.json"))


def _load_generated(scene_path: Path) -> GeneratedScene:
    boxes, classes = io.read_boxes(_boxes_path(scene_path))
    return GeneratedScene(io.read_scene(scene_path), boxes, classes)


def _load_corpus(data_dir, n_train):
    corpus = [_load_generated(p) for p in _scene_files(data_dir)]
    return split_corpus(corpus, n_train)


# ---------------------------------------------------------------- commands

def cmd_gen(args) -> int:
    scene_cfg, _ = _configs(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k in range(args.n_scenes):
        cfg = replace(scene_cfg, seed=scene_cfg.seed * 1000 + k)
        try:
            gen = generate_scene(cfg)
        except PlacementFailed:
            log.error("scene %d: PlacementFailed", k)
            return 2
        io.write_scene(out / f"scene_{k:03d}.jsonl", gen.scene)
        io.write_boxes(out / f"scene_{k:03d}.boxes.json", gen.gt_boxes, gen.box_classes)
    print(f"wrote {args.n_scenes} scenes to {out}")
    return 0


def cmd_perturb(args) -> int:
    boxes, classes = io.read_boxes(args.boxes)
    params = PerturbParams.for_preset(Preset(args.preset), seed=args.seed)
    io.write_boxes(args.out, apply_preset(boxes, params), classes)
    return 0


def cmd_label(args) -> int:
    scene = io.read_scene(args.scene)
    boxes, classes = io.read_boxes(args.boxes)
    if args.checkpoint:
        model = load_model(args.checkpoint)
        feats = model.encoder(raw_descriptor(scene)).data
        lcfg, assigner = model.cfg.labeler_config(), model.assigner
    else:
        # without a trained assigner overlaps fall back to the nearest box center
        feats, lcfg, assigner = raw_descriptor(scene), LabelerConfig(), None
    ctx = build_context(scene, boxes, feats, lcfg, partition_points(scene, boxes))
    pseudo = generate_pseudo_labels(scene, boxes, classes, feats, assigner, lcfg, ctx)
    io.write_pseudo_labels(args.out, scene, pseudo)
    agree = float(np.mean(pseudo.instance == scene.gt_instance))
    print(f"pseudo labels written to {args.out}; agreement with stored labels {agree:.3f}")
    return 0


def cmd_train(args) -> int:
    _, cfg = _configs(args)
    tr, held = _load_corpus(args.data, args.n_train)
    try:
        res = train(tr, cfg, held, log_path=args.log, checkpoint_path=args.out)
    except DivergedTraining as exc:
        log.error("%s", exc)
        save_checkpoint(args.out, exc.state)
        return 3
    print(f"final loss {res.final_loss:.4f}; checkpoint {args.out}")
    return 0


def cmd_segment(args) -> int:
    model = load_model(args.checkpoint)
    gen = _load_generated(Path(args.scene))
    ps = prepare(gen, model.cfg, 0)
    records = [{"class": m.class_id, "conf": m.confidence, "mask": np.flatnonzero(m.bits).tolist(),
                "box": det.box.to_dict(), "core_scale": det.core_scale}
               for m, det in detect(model, ps)]
    io.write_predictions(args.out, records)
    print(f"{len(records)} instances written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    scene = io.read_scene(args.scene)
    preds = []
    for r in io.read_predictions(args.pred):
        bits = np.zeros(scene.n_points, dtype=bool)
        bits[np.asarray(r["mask"], dtype=np.int64)] = True
        preds.append(InstanceMask(bits, float(r["conf"]), int(r["class"])))
    report = evaluate([(preds, gt_instances(scene))], [scene])
    print(json.dumps(report.to_dict(), indent=1))
    if args.csv:
        write_rows(args.csv, report_csv_rows(report), ["class", "ap", "ap50", "ap25"])
    return 0


def cmd_sweep(args) -> int:
    _, cfg = _configs(args)
    tr, held = _load_corpus(args.data, args.n_train)
    values = [v.strip() for v in args.values.split(";" if args.axis == "lambda" else ",")]
    if args.axis == "lambda":
        values = [tuple(float(x) for x in v.split(",")) for v in values]
    rows = sweep(args.axis, values, cfg, tr, held, csv_path=args.out)
    for r in rows:
        print(",".join(str(r.get(k, "")) for k in SWEEP_HEADER))
    return 0


def cmd_export_ply(args) -> int:
    scene = io.read_scene(args.scene)
    if args.labels:
        labels = io.read_pseudo_labels(args.labels)[0]
    elif args.pred:
        labels = np.full(scene.n_points, -1)
        for k, r in enumerate(sorted(io.read_predictions(args.pred), key=lambda r: r["conf"])):
            labels[np.asarray(r["mask"], dtype=np.int64)] = k
    else:
        labels = scene.gt_instance
    io.write_ply(args.out, scene.positions, io.instance_colors(labels), binary=args.binary)
    return 0


def cmd_config(args) -> int:
    print(dump(*_configs(args)), end="")
    return 0


# ---------------------------------------------------------------- parser

def _common(p, train_flags=False):
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int)
    if train_flags:
        p.add_argument("--iters", type=int)
        p.add_argument("--preset", choices=[s.value for s in Preset])
        p.add_argument("--mode", choices=["joint", "disjoint"])
        p.add_argument("--lr", type=float)
        p.add_argument("--q", type=int)
        p.add_argument("--n-blocks", dest="n_blocks", type=int)
        p.add_argument("--attention", choices=["scene", "scene+coarse", "full"])


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sketchyseg", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate synthetic scenes")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n-scenes", type=int, default=12)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("perturb", help="apply a sketchy-box preset to a box file")
    p.add_argument("--in", "--boxes", dest="boxes", required=True)
    p.add_argument("--preset", required=True, choices=[s.value for s in Preset])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_perturb)

    p = sub.add_parser("label", help="pseudo labels from boxes")
    p.add_argument("--scene", required=True)
    p.add_argument("--boxes", required=True)
    p.add_argument("--ckpt", "--checkpoint", dest="checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_label)

    p = sub.add_parser("train", help="train on a directory of scenes")
    _common(p, train_flags=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n-train", type=int, help="scenes used for training; the rest are held out")
    p.add_argument("--out", "--ckpt", dest="out", required=True, help="checkpoint path")
    p.add_argument("--log", help="metric CSV path")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("segment", help="predict instances for one scene")
    p.add_argument("--ckpt", "--checkpoint", dest="checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_segment)

    p = sub.add_parser("eval", help="score predictions against a scene's labels")
    p.add_argument("--scene", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--csv", help="per-class AP table")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="ablation sweep along one axis")
    _common(p, train_flags=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n-train", type=int)
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True,
                   help="comma separated; for lambda use ';' between triples, e.g. '0.5,1,0.5;0.1,1,0.5'")
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("export-ply", help="write a PLY colored by instance")
    p.add_argument("--scene", required=True)
    p.add_argument("--labels", help="pseudo-label file to color by")
    p.add_argument("--pred", help="prediction file to color by")
    p.add_argument("--binary", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_export_ply)

    p = sub.add_parser("config", help="print the resolved configuration")
    _common(p, train_flags=True)
    p.set_defaults(fn=cmd_config)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
