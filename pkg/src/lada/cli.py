"""``lada`` command line: data preparation, training and evaluation.

Every subcommand writes its results to files and prints a one-line JSON
summary on stdout.  Exit codes: 0 success, 1 usage error, 2 data error,
3 runtime failure.  Relative default paths resolve against ``$LADA_DATA_DIR``
(current directory when unset).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("lada")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def data_dir() -> Path:
    return Path(os.environ.get("LADA_DATA_DIR", "."))


def _emit(summary: dict) -> None:
    print(json.dumps(summary, sort_keys=True, default=str))


def _images_dir(args) -> Path:
    return Path(args.images) if args.images else data_dir() / "images"


def _train_config(args):
    from lada.training import TrainConfig, load_config

    cfg = load_config(args.config) if args.config else TrainConfig()
    overrides = {"seed": args.seed}
    for flag, key in (("epochs", "epochs"), ("steps_per_epoch", "steps_per_epoch"),
                      ("lr", "base_lr"), ("batch_size", "batch_size")):
        value = getattr(args, flag)
        if value is not None:
            overrides[key] = value
    return replace(cfg, **overrides)


def _detector_config(preset: str, num_classes: int):
    from lada.detector import DetectorConfig, toy_config

    return toy_config(num_classes=num_classes) if preset == "toy" else DetectorConfig(num_classes=num_classes)


def _num_classes(*manifests) -> int:
    ids = {b.class_id for m in manifests for r in m for b in r.ground_truth}
    return max(ids) + 1 if ids else 1


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> dict:
    from lada.protocol import save_manifest
    from lada.synth import generate_dataset, source_spec, target_spec, write_images

    out = Path(args.out) if args.out else data_dir()
    out.mkdir(parents=True, exist_ok=True)
    size = dict(height=args.size, width=args.size)
    src, src_images = generate_dataset(source_spec(**size), args.n_source, seed=args.seed)
    tgt, tgt_images = generate_dataset(target_spec(**size), args.n_target, seed=args.seed + 1)
    write_images({**src_images, **tgt_images}, out / "images")
    save_manifest(src, out / "source.jsonl")
    save_manifest(tgt, out / "target.jsonl")
    return {"command": "synth", "seed": args.seed, "out": str(out),
            "source": len(src), "target": len(tgt)}


def cmd_split(args) -> dict:
    from lada.protocol import (
        SOURCE, TARGET, Manifest, classify_domain, load_manifest, sample_protocol, save_manifest,
        split_train_val,
    )

    if not 0 < args.protocol < 100:
        raise UsageError(f"--protocol is a percentage in (0, 100), got {args.protocol}")
    if not 0 <= args.val_fraction < 1:
        raise UsageError(f"--val-fraction must be in [0, 1), got {args.val_fraction}")
    manifest = load_manifest(args.manifest)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = {"command": "split", "seed": args.seed, "protocol": args.protocol,
               "val_fraction": args.val_fraction}

    records = list(manifest)
    if args.source_scenes:
        scenes = [s for s in args.source_scenes.split(",") if s]
        records = [replace(r, domain=classify_domain(r.scene, scenes, args.by_camera)) for r in records]
        source = Manifest([r for r in records if r.domain == SOURCE], "source", args.seed)
        save_manifest(source, out / "source.jsonl")
        summary["source"] = len(source)
        records = [r for r in records if r.domain == TARGET]

    if args.val_fraction > 0:
        train, val = split_train_val(records, args.val_fraction, args.seed)
        save_manifest(val, out / "val.jsonl")
        summary["val"] = len(val)
    else:
        train = Manifest(records, "train", args.seed)
    labeled, unlabeled = sample_protocol(train, args.protocol / 100.0, args.seed)
    save_manifest(labeled, out / "labeled.jsonl")
    save_manifest(unlabeled, out / "unlabeled.jsonl")
    summary.update(train=len(train), labeled=len(labeled), unlabeled=len(unlabeled))
    return summary


def cmd_merge_labels(args) -> dict:
    from lada.protocol import Manifest, load_manifest, merge_record, save_manifest

    manifest = load_manifest(args.manifest)
    merged = Manifest([merge_record(r) for r in manifest], manifest.split_name,
                      manifest.seed, manifest.protocol)
    save_manifest(merged, args.out)
    before = sum(len(r.ground_truth) for r in manifest)
    after = sum(len(r.ground_truth) for r in merged)
    return {"command": "merge-labels", "records": len(merged), "boxes_before": before,
            "boxes_after": after, "out": args.out}


def cmd_train_stage1(args) -> dict:
    from lada.detector import LADADetector, save_checkpoint
    from lada.protocol import load_manifest
    from lada.synth import read_images
    from lada.training import train_stage1

    cfg = _train_config(args)
    source = load_manifest(args.source)
    val = load_manifest(args.val) if args.val else None
    ids = source.image_ids + (val.image_ids if val else [])
    images = read_images(ids, _images_dir(args))
    det_cfg = _detector_config(args.preset, _num_classes(source, *([val] if val else [])))
    try:
        result = train_stage1(source, images, cfg, det_cfg, val=list(val) if val else None,
                              log_path=args.log)
    except (RuntimeError, FloatingPointError) as exc:
        raise _TrainingFailure(str(exc)) from exc
    save_checkpoint(result.model, args.out, extra={"stage": 1, "train": cfg.to_dict()})
    summary = {"command": "train-stage1", "seed": cfg.seed, "steps": len(result.step_logs),
               "final_loss": result.step_logs[-1]["total"], "checkpoint": args.out}
    if val:
        summary["val_map_50"] = result.epoch_logs[-1]["val_map_50"]
    return summary


def cmd_train_stage2(args) -> dict:
    from lada.detector import load_checkpoint, save_checkpoint
    from lada.protocol import load_manifest
    from lada.synth import read_images
    from lada.training import train_stage2

    cfg = _train_config(args)
    source = load_manifest(args.source)
    labeled = load_manifest(args.target_labeled)
    unlabeled = load_manifest(args.target_unlabeled)
    val = load_manifest(args.val) if args.val else None
    init = load_checkpoint(args.init)
    ids = source.image_ids + labeled.image_ids + unlabeled.image_ids + (val.image_ids if val else [])
    images = read_images(ids, _images_dir(args))
    try:
        result = train_stage2(list(source), list(labeled), list(unlabeled), init, images, cfg,
                              val=list(val) if val else None, log_path=args.log)
    except (RuntimeError, FloatingPointError) as exc:
        raise _TrainingFailure(str(exc)) from exc
    save_checkpoint(result.teacher, args.out, extra={"stage": 2, "role": "teacher", "train": cfg.to_dict()})
    if args.student_out:
        save_checkpoint(result.model, args.student_out,
                        extra={"stage": 2, "role": "student", "train": cfg.to_dict()})
    last = result.step_logs[-1]
    summary = {"command": "train-stage2", "seed": cfg.seed, "steps": len(result.step_logs),
               "final_loss": last["total"], "checkpoint": args.out,
               "pseudo_positives": sum(s["positives"] for s in result.step_logs),
               "unusable": sum(s["unusable"] for s in result.step_logs)}
    if val:
        summary["val_map_50"] = result.epoch_logs[-1]["val_map_50"]
    return summary


def _model_detections(args, records):
    from lada.detector import load_checkpoint
    from lada.synth import read_images
    from lada.training import predict

    model = load_checkpoint(args.checkpoint)
    images = read_images([r.image_id for r in records], _images_dir(args))
    return predict(model, records, images)


def cmd_predict(args) -> dict:
    from lada.metrics import save_detections
    from lada.protocol import load_manifest

    records = list(load_manifest(args.manifest))
    dets = _model_detections(args, records)
    save_detections(dets, args.out)
    return {"command": "predict", "images": len(records), "detections": len(dets), "out": args.out}


def cmd_eval(args) -> dict:
    from lada.metrics import evaluate, load_detections
    from lada.protocol import load_manifest

    if bool(args.detections) == bool(args.checkpoint):
        raise UsageError("give exactly one of --detections or --checkpoint")
    records = list(load_manifest(args.manifest))
    dets = load_detections(args.detections) if args.detections else _model_detections(args, records)
    report = evaluate(dets, {r.image_id: list(r.ground_truth) for r in records})
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_dict(), indent=2), encoding="utf-8")
    return {"command": "eval", "map_50_95": report.map_50_95, "map_50": report.map_50,
            "images": len(records), "detections": len(dets)}


def cmd_export(args) -> dict:
    from lada.protocol import export_coco, load_manifest

    coco = export_coco(load_manifest(args.manifest), args.out, include_hidden=args.include_hidden)
    return {"command": "export", "images": len(coco["images"]),
            "annotations": len(coco["annotations"]), "out": args.out}


class _TrainingFailure(Exception):
    pass


# ------------------------------------------------------------------ parser


def _add_training_flags(p, stage: int) -> None:
    p.add_argument("--images", help="image directory (default: $LADA_DATA_DIR/images)")
    p.add_argument("--config", help="training config file of 'key = value' lines")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    p.add_argument("--epochs", type=int, help="override the configured epoch count")
    p.add_argument("--steps-per-epoch", type=int, help="override steps per epoch (0 derives it)")
    p.add_argument("--lr", type=float, help="override the base learning rate")
    p.add_argument("--batch-size", type=int, help="override the batch size")
    p.add_argument("--val", help="validation manifest evaluated after every epoch")
    p.add_argument("--log", help="epoch log output (JSON lines)")
    p.add_argument("--out", required=True, help="checkpoint output path (.safetensors)")
    if stage == 1:
        p.add_argument("--preset", choices=("default", "toy"), default="default",
                       help="detector size preset (default: default)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lada", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic source/target smoke dataset")
    p.add_argument("--out", help="output directory (default: $LADA_DATA_DIR)")
    p.add_argument("--n-source", type=int, default=2000, help="source images (default: 2000)")
    p.add_argument("--n-target", type=int, default=2000, help="target images (default: 2000)")
    p.add_argument("--size", type=int, default=64, help="square image side in pixels (default: 64)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="domain split, train/val split and labeled-fraction sampling")
    p.add_argument("--manifest", required=True, help="input manifest")
    p.add_argument("--out-dir", required=True, help="directory for the output manifests")
    p.add_argument("--protocol", type=float, default=1.0,
                   help="labeled percentage of target train, e.g. 0.5, 1.0 or 3.0 (default: 1.0)")
    p.add_argument("--val-fraction", type=float, default=0.05,
                   help="fraction held out for validation; 0 keeps every record in train (default: 0.05)")
    p.add_argument("--source-scenes", help="comma-separated scene names forming the source domain")
    p.add_argument("--by-camera", action="store_true", help="match --source-scenes on camera name")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("merge-labels", help="collapse each class to one enclosing box per image")
    p.add_argument("--manifest", required=True, help="input manifest")
    p.add_argument("--out", required=True, help="output manifest")
    p.set_defaults(func=cmd_merge_labels)

    p = sub.add_parser("train-stage1", help="source-only supervised training")
    p.add_argument("--source", required=True, help="labeled source manifest")
    _add_training_flags(p, 1)
    p.set_defaults(func=cmd_train_stage1)

    p = sub.add_parser("train-stage2", help="teacher-student domain adaptation from a stage-1 checkpoint")
    p.add_argument("--source", required=True, help="labeled source manifest")
    p.add_argument("--target-labeled", required=True, help="labeled target manifest")
    p.add_argument("--target-unlabeled", required=True, help="unlabeled target manifest")
    p.add_argument("--init", required=True, help="stage-1 checkpoint")
    p.add_argument("--student-out", help="also save the student weights here")
    _add_training_flags(p, 2)
    p.set_defaults(func=cmd_train_stage2)

    p = sub.add_parser("predict", help="run a checkpoint over a manifest")
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--manifest", required=True, help="images to run on")
    p.add_argument("--images", help="image directory (default: $LADA_DATA_DIR/images)")
    p.add_argument("--out", required=True, help="detections output (JSON lines)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="mAP@0.5:0.95 and mAP@0.5 against a manifest's ground truth")
    p.add_argument("--manifest", required=True, help="ground-truth manifest")
    p.add_argument("--detections", help="detections file (JSON lines)")
    p.add_argument("--checkpoint", help="model checkpoint to run instead of --detections")
    p.add_argument("--images", help="image directory for --checkpoint (default: $LADA_DATA_DIR/images)")
    p.add_argument("--out", help="full report output (JSON)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="write a manifest as COCO detection JSON")
    p.add_argument("--manifest", required=True, help="input manifest")
    p.add_argument("--out", required=True, help="COCO JSON output")
    p.add_argument("--include-hidden", action="store_true",
                   help="include the held-back annotations of unlabeled records")
    p.set_defaults(func=cmd_export)
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    from lada.errors import ConfigError, LadaError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _emit(args.func(args))
    except (UsageError, ConfigError) as exc:
        print(f"lada {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _TrainingFailure as exc:
        print(f"lada {args.command}: training failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, LadaError, ValueError, KeyError) as exc:
        print(f"lada {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        print(f"lada {args.command}: failed: {exc!r}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
