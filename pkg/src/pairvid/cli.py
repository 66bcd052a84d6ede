"""Command-line entry point.

Subcommands: gen-data, train-stage1, train-stage2, eval-detect, eval-video,
ablate, predict. Exit codes: 0 success, 1 usage error, 2 runtime failure.
Every run writes a config echo and a machine-readable summary.json next to its
outputs; a short human-readable summary goes to stdout.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
import traceback
from pathlib import Path

from pairvid import datagen
from pairvid.config import parse_config_file, run_config_from, synthetic_config_from
from pairvid.data import enumerate_clips, load_split


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage; the contract here is exit code 1.
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def build_parser() -> _Parser:
    parser = _Parser(prog="pairvid", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, ckpt=False, data=True):
        p.add_argument("--config", required=True, help="run config file (INI)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", required=True, help="output directory")
        if data:
            p.add_argument("--data", required=True, help="dataset root")
        if ckpt:
            p.add_argument("--ckpt", required=True, help="model checkpoint (.npz)")

    common(sub.add_parser("gen-data", help="generate a synthetic dataset"), data=False)
    common(sub.add_parser("train-stage1", help="train the single-frame detector"))
    common(sub.add_parser("train-stage2", help="train the clip diagnosis head"), ckpt=True)
    p = sub.add_parser("eval-detect", help="detection metrics on a split")
    common(p, ckpt=True)
    p.add_argument("--split", default="val", choices=("train", "val", "test"))
    p = sub.add_parser("eval-video", help="clip diagnosis metrics on a split")
    common(p, ckpt=True)
    p.add_argument("--split", default="val", choices=("train", "val", "test"))
    p = sub.add_parser("ablate", help="clip length/interval grid")
    common(p, ckpt=True)
    p = sub.add_parser("predict", help="dump detections and diagnoses for one case")
    common(p, ckpt=True)
    p.add_argument("--case", required=True, help="case_id to predict")
    return parser


def _prepare_out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(args.config, out / "config_echo.ini")
    return out


def _write_summary(out: Path, payload: dict) -> None:
    (out / "summary.json").write_text(json.dumps(payload, indent=2, sort_keys=True))


def cmd_gen_data(args) -> dict:
    sections = parse_config_file(args.config)
    cfg, fractions = synthetic_config_from(sections, seed=args.seed)
    out = _prepare_out(args)
    cases = datagen.generate_dataset(cfg)
    manifest = datagen.write_dataset(cases, out, config=cfg, split_fractions=fractions)
    sizes = {k: len(v) for k, v in manifest.splits.items()}
    print(f"wrote {len(cases)} cases to {out} (splits: {sizes})")
    return {"command": "gen-data", "cases": len(cases), "splits": sizes, "root": str(out)}


def cmd_train_stage1(args) -> dict:
    from pairvid.train import train_stage1

    sections = parse_config_file(args.config)
    config = run_config_from(sections, data_root=args.data, out_dir=args.out, seed=args.seed)
    out = _prepare_out(args)
    train_cases = load_split(args.data, "train")
    val_cases = load_split(args.data, "val")
    result = train_stage1(config, train_cases, val_cases, log=True)
    print(f"best val AP50 {result.best_ap50:.3f} at epoch {result.best_epoch}")
    return {
        "command": "train-stage1",
        "best_ap50": result.best_ap50,
        "best_epoch": result.best_epoch,
        "checkpoint": str(out / "stage1.npz"),
    }


def cmd_train_stage2(args) -> dict:
    from pairvid.pipeline import load_bundle, save_bundle
    from pairvid.train import train_stage2

    sections = parse_config_file(args.config)
    config = run_config_from(sections, data_root=args.data, out_dir=args.out, seed=args.seed)
    out = _prepare_out(args)
    bundle = load_bundle(args.ckpt)
    train_cases = load_split(args.data, "train")
    val_cases = load_split(args.data, "val")
    result = train_stage2(config, bundle.detector, train_cases, val_cases, log=True)
    bundle.aggregator = result.aggregator
    bundle.config.update(config.to_model_config())
    save_bundle(bundle, out / "stage2.npz")
    from pairvid.evaluation import write_csv_rows

    if result.history:
        write_csv_rows(out / "stage2_history.csv", result.history)
    print(
        f"best val clip accuracy {result.best_accuracy:.3f} "
        f"(l={config.clip_length}, interval={config.clip_interval})"
    )
    return {
        "command": "train-stage2",
        "best_accuracy": result.best_accuracy,
        "best_f1": result.best_f1,
        "checkpoint": str(out / "stage2.npz"),
    }


def cmd_eval_detect(args) -> dict:
    from pairvid.pipeline import load_bundle
    from pairvid.train import evaluate_detector

    sections = parse_config_file(args.config)
    config = run_config_from(sections, data_root=args.data, seed=args.seed)
    out = _prepare_out(args)
    bundle = load_bundle(args.ckpt)
    cases = load_split(args.data, args.split)
    metrics = evaluate_detector(
        bundle.detector, cases, score_thresh=config.score_thresh, nms_iou=config.nms_iou
    )
    print(
        f"{args.split}: AP50={metrics['ap50']:.3f} AP75={metrics['ap75']:.3f} "
        f"frame-cls-acc={metrics['frame_cls_accuracy']:.3f}"
    )
    return {"command": "eval-detect", "split": args.split, **metrics}


def cmd_eval_video(args) -> dict:
    from pairvid.pipeline import load_bundle
    from pairvid.train import cache_selected_features, clips_from_cache, evaluate_clips

    sections = parse_config_file(args.config)
    config = run_config_from(sections, data_root=args.data, seed=args.seed)
    out = _prepare_out(args)
    bundle = load_bundle(args.ckpt)
    cases = load_split(args.data, args.split)
    cache = cache_selected_features(bundle.detector, cases)
    clips = clips_from_cache(cache, cases, config.clip_length, config.clip_interval)
    metrics = evaluate_clips(bundle.aggregator, clips)
    print(
        f"{args.split}: clip-acc={metrics['accuracy']:.3f} macro-F1={metrics['f1']:.3f} "
        f"case-acc={metrics['case_accuracy']:.3f}"
    )
    return {"command": "eval-video", "split": args.split, "clips": len(clips), **metrics}


def cmd_ablate(args) -> dict:
    from pairvid.evaluation import run_ablation_grid
    from pairvid.pipeline import load_bundle

    sections = parse_config_file(args.config)
    config = run_config_from(sections, data_root=args.data, seed=args.seed)
    out = _prepare_out(args)
    bundle = load_bundle(args.ckpt)
    rows = run_ablation_grid(
        bundle.detector,
        load_split(args.data, "train"),
        load_split(args.data, "val"),
        config,
        out_csv=out / "ablation.csv",
    )
    for row in rows:
        print(
            f"l={row['clip_length']} interval={row['interval']}: "
            f"acc={row['accuracy']:.3f} f1={row['f1']:.3f}"
        )
    return {"command": "ablate", "rows": rows, "csv": str(out / "ablation.csv")}


def cmd_predict(args) -> dict:
    from pairvid.pipeline import detect_frame, diagnose_clip, load_bundle

    sections = parse_config_file(args.config)
    config = run_config_from(sections, data_root=args.data, seed=args.seed)
    out = _prepare_out(args)
    bundle = load_bundle(args.ckpt)
    manifest = json.loads((Path(args.data) / "manifest.json").read_text())
    rows = {r["case_id"]: r for r in manifest["cases"]}
    if args.case not in rows:
        raise KeyError(f"case {args.case!r} not in dataset {args.data}")
    from pairvid.data import load_case

    case = load_case(args.data, rows[args.case])

    detections = []
    for frame in case.frames:
        dets = detect_frame(bundle, frame, score_thresh=config.score_thresh,
                            iou_thresh=config.nms_iou)
        detections.append(
            {
                "frame_index": frame.frame_index,
                "boxes": [list(d.box.as_array()) for d in dets],
                "scores": [d.score for d in dets],
                "classes": [d.cls for d in dets],
                "cells": [[d.level, d.cell[0], d.cell[1]] for d in dets],
            }
        )
    (out / f"{args.case}_detections.json").write_text(json.dumps(detections, indent=2))

    diagnoses = []
    for clip in enumerate_clips(case, config.clip_length, config.clip_interval):
        diag = diagnose_clip(bundle, clip)
        diagnoses.append(
            {
                "case_id": case.case_id,
                "start": clip.start,
                "l": clip.length,
                "interval": clip.interval,
                "probs": list(diag.probs),
                "predicted": diag.predicted,
            }
        )
    (out / f"{args.case}_diagnosis.json").write_text(json.dumps(diagnoses, indent=2))
    print(f"case {args.case}: {len(detections)} frames, {len(diagnoses)} clips -> {out}")
    return {
        "command": "predict",
        "case": args.case,
        "frames": len(detections),
        "clips": len(diagnoses),
    }


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-stage1": cmd_train_stage1,
    "train-stage2": cmd_train_stage2,
    "eval-detect": cmd_eval_detect,
    "eval-video": cmd_eval_video,
    "ablate": cmd_ablate,
    "predict": cmd_predict,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    try:
        payload = COMMANDS[args.command](args)
        _write_summary(Path(args.out), payload)
        return 0
    except Exception as exc:  # runtime failure -> exit 2 with a named cause
        print(f"error: {exc}", file=sys.stderr)
        traceback.print_exc(file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
