"""Detection and diagnosis metrics, plus the clip-length/interval ablation grid.

Average precision is computed from scratch: predictions ranked by score across
frames, greedy matching to at most one unmatched ground truth at the IoU
threshold (highest IoU wins, ties by ground-truth index), and the all-point
interpolated area under the monotone precision envelope.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from pairvid.boxes import BBox, box_iou
from pairvid.data import CLASS_NAMES
from pairvid.detect import DetectionBox

# Clip-length / sampling-interval grid of the ablation table.
ABLATION_GRID = ((1, 1), (2, 1), (2, 2), (4, 1), (4, 2), (8, 1))


@dataclass
class EvalReport:
    """Headline metrics; everything lies in [0, 1]."""

    ap50: float = float("nan")
    ap75: float = float("nan")
    accuracy: float = float("nan")
    f1: float = float("nan")
    per_case: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "ap50": self.ap50,
            "ap75": self.ap75,
            "accuracy": self.accuracy,
            "f1": self.f1,
            "per_case": self.per_case,
            "config": self.config,
            "extras": self.extras,
        }
        return json.dumps(payload, indent=2, sort_keys=True)


def average_precision(
    frame_preds: list[list[tuple[BBox, float]]],
    frame_gts: list[list[BBox]],
    iou_thresh: float,
) -> float:
    """AP over a set of frames for one class.

    frame_preds[i] holds (box, score) pairs for frame i; frame_gts[i] holds
    that frame's ground-truth boxes. Raises when there is no ground truth at
    all (the caller filters empty classes).
    """
    if len(frame_preds) != len(frame_gts):
        raise ValueError("prediction and ground-truth frame counts differ")
    total_gt = sum(len(g) for g in frame_gts)
    if total_gt == 0:
        raise ValueError("average precision undefined: no ground-truth boxes")

    entries = []
    for fi, preds in enumerate(frame_preds):
        for oi, (box, score) in enumerate(preds):
            if not 0.0 <= score <= 1.0:
                raise ValueError(f"score {score} outside [0, 1]")
            entries.append((score, fi, oi, box))
    if not entries:
        return 0.0
    entries.sort(key=lambda e: (-e[0], e[1], e[2]))

    matched: list[set[int]] = [set() for _ in frame_gts]
    tp = np.zeros(len(entries))
    for rank, (score, fi, oi, box) in enumerate(entries):
        best_iou, best_gt = -1.0, -1
        for gi, gt in enumerate(frame_gts[fi]):
            if gi in matched[fi]:
                continue
            v = box_iou(box, gt)
            if v >= iou_thresh and v > best_iou:
                best_iou, best_gt = v, gi
        if best_gt >= 0:
            matched[fi].add(best_gt)
            tp[rank] = 1.0

    cum_tp = np.cumsum(tp)
    precision = cum_tp / np.arange(1, len(entries) + 1)
    recall = cum_tp / total_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev = 0.0
    for i in range(len(entries)):
        if recall[i] > prev:
            ap += (recall[i] - prev) * envelope[i]
            prev = recall[i]
    return float(ap)


def detection_metrics(
    frame_dets: list[list[DetectionBox]],
    frame_gt_boxes: list[list[BBox]],
    frame_gt_classes: list[list[int]],
    num_classes: int = 2,
) -> dict:
    """Per-class AP at IoU 0.5/0.75 (mean over classes with ground truth) and
    top-detection frame classification accuracy."""
    result = {}
    for name, thresh in (("ap50", 0.5), ("ap75", 0.75)):
        per_class = []
        for cls in range(num_classes):
            gts = [
                [b for b, c in zip(boxes, classes) if c == cls]
                for boxes, classes in zip(frame_gt_boxes, frame_gt_classes)
            ]
            if sum(len(g) for g in gts) == 0:
                continue
            preds = [
                [(d.box, d.score) for d in dets if d.cls == cls] for dets in frame_dets
            ]
            per_class.append(average_precision(preds, gts, thresh))
        result[name] = float(np.mean(per_class)) if per_class else float("nan")

    correct = total = 0
    for dets, classes in zip(frame_dets, frame_gt_classes):
        if not classes:
            continue
        total += 1
        if dets and dets[0].cls == classes[0]:
            correct += 1
    result["frame_cls_accuracy"] = correct / total if total else float("nan")
    return result


def diagnosis_metrics(pred_labels, true_labels) -> dict:
    """Accuracy and F1 for the two-class diagnosis.

    Macro F1 is the headline 'f1'; the per-class and positive-class
    (malignant) values are included alongside.
    """
    pred = np.asarray(pred_labels, dtype=int)
    true = np.asarray(true_labels, dtype=int)
    if pred.shape != true.shape or pred.size == 0:
        raise ValueError("need equal, non-empty label arrays")

    accuracy = float(np.mean(pred == true))
    f1_per_class = []
    for cls in (0, 1):
        tp = int(np.sum((pred == cls) & (true == cls)))
        fp = int(np.sum((pred == cls) & (true != cls)))
        fn = int(np.sum((pred != cls) & (true == cls)))
        denom = 2 * tp + fp + fn
        f1_per_class.append(2 * tp / denom if denom else 0.0)
    return {
        "accuracy": accuracy,
        "f1": float(np.mean(f1_per_class)),
        "f1_benign": f1_per_class[0],
        "f1_malignant": f1_per_class[1],
    }


def majority_vote(case_ids, pred_labels, true_labels) -> dict:
    """Per-case majority vote over clip predictions (secondary statistic)."""
    by_case: dict[str, list[int]] = {}
    truth: dict[str, int] = {}
    for cid, p, t in zip(case_ids, pred_labels, true_labels):
        by_case.setdefault(cid, []).append(int(p))
        truth[cid] = int(t)
    votes = {cid: int(np.mean(v) >= 0.5) for cid, v in by_case.items()}
    correct = sum(votes[cid] == truth[cid] for cid in votes)
    return {"case_accuracy": correct / len(votes) if votes else float("nan"), "votes": votes}


def run_ablation_grid(
    detector,
    train_cases,
    val_cases,
    config,
    out_csv: str | Path | None = None,
    grid=ABLATION_GRID,
) -> list[dict]:
    """Train and evaluate one aggregation head per (clip length, interval) cell.

    Returns the table rows; optionally writes them as CSV.
    """
    from pairvid.train import cache_selected_features, train_stage2  # lazy: train imports this module

    cache = cache_selected_features(detector, train_cases)
    val_cache = cache_selected_features(detector, val_cases)
    rows = []
    for length, interval in grid:
        result = train_stage2(
            config, detector, train_cases, val_cases,
            clip_length=length, clip_interval=interval,
            cache=cache, val_cache=val_cache,
        )
        rows.append(
            {
                "clip_length": length,
                "interval": interval,
                "accuracy": result.best_accuracy,
                "f1": result.best_f1,
                "case_accuracy": result.best_case_accuracy,
            }
        )
    if out_csv is not None:
        write_csv_rows(out_csv, rows)
    return rows


def write_csv_rows(path: str | Path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def read_csv_rows(path: str | Path) -> list[dict]:
    with Path(path).open() as fh:
        return list(csv.DictReader(fh))
