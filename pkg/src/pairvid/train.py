"""Two-stage training: single-frame detector, then frozen-detector clip head.

Stage 1 trains backbone + fusion + head with SGD (linear warmup, cosine decay)
under strong synchronized augmentation (mosaic/mixup), disabled for the final
no_aug_epochs; the best checkpoint is chosen by validation AP50. Stage 2
freezes the detector in eval mode, precomputes selected per-frame features
once, and trains only the temporal aggregation head on clips.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from pairvid.data import (
    CaseRecord,
    MultiBoxFrame,
    as_multibox,
    augment_pair,
    mixup,
    mosaic,
    sample_augment_params,
)
from pairvid.detect import decode_and_nms, detection_loss
from pairvid.evaluation import detection_metrics, diagnosis_metrics, majority_vote, write_csv_rows
from pairvid.pipeline import DetectionModel, ModelBundle, build_bundle, save_bundle
from pairvid.selection import select_frame_features
from pairvid.temporal import TemporalAggregator


@dataclass
class RunConfig:
    """Training hyperparameters. Stage-1 optimization defaults follow the
    standard recipe: 150 epochs, batch 2, SGD lr 0.0025, momentum 0.9,
    weight decay 0.0005."""

    # Paths
    data_root: str = "data"
    out_dir: str = ""
    # Stage-1 optimization
    epochs: int = 150
    batch_size: int = 2
    lr: float = 0.0025
    momentum: float = 0.9
    weight_decay: float = 0.0005
    warmup_epochs: int = 5
    no_aug_epochs: int = 15
    # Augmentation
    mosaic_prob: float = 0.5
    mixup_prob: float = 0.2
    max_angle: float = 10.0
    # Stage 2
    clip_length: int = 8
    clip_interval: int = 1
    stage2_epochs: int = 30
    stage2_lr: float = 0.001
    stage2_batch_size: int = 16
    # Model
    image_size: int = 128
    fusion: str = "dual_attention"
    d_head: int = 64
    num_classes: int = 2
    patch_size: int = 4
    stage_dims: tuple[int, int, int] = (32, 64, 128)
    blocks_per_stage: tuple[int, int, int] = (1, 1, 2)
    attention_window: int = 4
    # Evaluation
    score_thresh: float = 0.01
    nms_iou: float = 0.65
    eval_interval: int = 1
    # Reproducibility
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "lr", "momentum", "weight_decay", "stage2_lr",
                     "clip_length", "clip_interval", "stage2_epochs", "image_size"):
            if getattr(self, name) is not None and getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def to_model_config(self) -> dict:
        return {
            "image_size": self.image_size,
            "fusion": self.fusion,
            "d_head": self.d_head,
            "num_classes": self.num_classes,
            "patch_size": self.patch_size,
            "stage_dims": tuple(self.stage_dims),
            "blocks_per_stage": tuple(self.blocks_per_stage),
            "attention_window": self.attention_window,
            "clip_length": self.clip_length,
            "clip_interval": self.clip_interval,
            "seed": self.seed,
        }


def set_seed(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))


def _epoch_rng(seed: int, epoch: int, salt: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(epoch, salt)))


# ---------------------------------------------------------------------------
# Stage-1 sample pipeline
# ---------------------------------------------------------------------------


def _frame_pool(cases: list[CaseRecord]) -> list:
    return [frame for case in cases for frame in case.frames]


def _augmented_frame(pool, idx, rng, config: RunConfig) -> MultiBoxFrame:
    for _ in range(10):
        params = sample_augment_params(rng, max_angle=config.max_angle, image_size=config.image_size)
        out = augment_pair(pool[idx], params)
        if out is not None:
            return out
    return as_multibox(pool[idx])


def build_training_sample(pool, idx, rng, config: RunConfig, strong: bool) -> MultiBoxFrame:
    """One augmented sample: geometric+photometric jitter, optionally wrapped
    in a mosaic montage and a mixup blend during the strong phase."""
    if strong and rng.random() < config.mosaic_prob:
        others = rng.integers(0, len(pool), size=3)
        parts = [_augmented_frame(pool, i, rng, config) for i in (idx, *others)]
        sample: MultiBoxFrame = mosaic(parts, rng=rng)
    else:
        sample = _augmented_frame(pool, idx, rng, config)
    if strong and rng.random() < config.mixup_prob:
        partner = _augmented_frame(pool, int(rng.integers(0, len(pool))), rng, config)
        sample = mixup(sample, partner, float(rng.uniform(0.4, 0.6)))
    return sample


def _batch_tensors(samples: list[MultiBoxFrame]) -> tuple[torch.Tensor, torch.Tensor]:
    a = torch.from_numpy(np.stack([s.image_a for s in samples])[:, None].astype(np.float32))
    b = torch.from_numpy(np.stack([s.image_b for s in samples])[:, None].astype(np.float32))
    return a, b


def _lr_at(config: RunConfig, it: int, iters_per_epoch: int) -> float:
    warmup = max(config.warmup_epochs * iters_per_epoch, 1)
    total = max(config.epochs * iters_per_epoch, 1)
    if it < warmup and config.warmup_epochs > 0:
        return config.lr * (it + 1) / warmup
    span = max(total - warmup, 1)
    progress = min(max(it - warmup, 0) / span, 1.0)
    floor = 0.05 * config.lr
    return floor + 0.5 * (config.lr - floor) * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# Stage 1
# ---------------------------------------------------------------------------


@dataclass
class Stage1Result:
    detector: DetectionModel
    history: list[dict]
    best_state: dict
    best_ap50: float
    best_epoch: int
    bundle: ModelBundle


def evaluate_detector(
    detector: DetectionModel,
    cases: list[CaseRecord],
    score_thresh: float = 0.01,
    nms_iou: float = 0.65,
    batch_size: int = 16,
) -> dict:
    """AP50/AP75 + frame classification accuracy over every frame of `cases`."""
    detector.eval()
    frames = _frame_pool(cases)
    frame_dets, gt_boxes, gt_classes = [], [], []
    with torch.no_grad():
        for lo in range(0, len(frames), batch_size):
            chunk = frames[lo : lo + batch_size]
            a, b = _batch_tensors([as_multibox(f) for f in chunk])
            pred = detector(a, b)
            for i, frame in enumerate(chunk):
                frame_dets.append(
                    decode_and_nms(pred, score_thresh=score_thresh, iou_thresh=nms_iou, batch_index=i)
                )
                gt_boxes.append([frame.box])
                gt_classes.append([frame.cls])
    return detection_metrics(frame_dets, gt_boxes, gt_classes)


def train_stage1(
    config: RunConfig,
    train_cases: list[CaseRecord],
    val_cases: list[CaseRecord],
    log: bool = False,
) -> Stage1Result:
    set_seed(config.seed)
    bundle = build_bundle(config.to_model_config())
    detector = bundle.detector
    pool = _frame_pool(train_cases)
    if not pool:
        raise ValueError("no training frames")

    optimizer = torch.optim.SGD(
        detector.parameters(),
        lr=config.lr,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    iters_per_epoch = max(len(pool) // max(config.batch_size, 1), 1)
    history: list[dict] = []
    best_state = copy.deepcopy(detector.state_dict())
    best_ap50, best_epoch = -1.0, -1
    it = 0

    for epoch in range(config.epochs):
        detector.train()
        strong = epoch < config.epochs - config.no_aug_epochs
        rng = _epoch_rng(config.seed, epoch)
        order = rng.permutation(len(pool))
        epoch_loss = {"total": 0.0, "box": 0.0, "obj": 0.0, "cls": 0.0}

        for step in range(iters_per_epoch):
            idxs = order[step * config.batch_size : (step + 1) * config.batch_size]
            if len(idxs) == 0:
                break
            samples = [build_training_sample(pool, int(i), rng, config, strong) for i in idxs]
            a, b = _batch_tensors(samples)
            lr = _lr_at(config, it, iters_per_epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr

            pred = detector(a, b)
            total = pred.cls_logits[0].new_zeros(())
            comps_sum = {"box": 0.0, "obj": 0.0, "cls": 0.0}
            for i, sample in enumerate(samples):
                comps = detection_loss(
                    pred, sample.boxes, sample.classes, gt_weights=sample.weights, batch_index=i
                )
                total = total + comps["total"]
                for k in comps_sum:
                    comps_sum[k] += float(comps[k].detach())
            total = total / len(samples)
            if not torch.isfinite(total):
                raise RuntimeError(
                    f"training diverged: non-finite loss at epoch {epoch} step {step} "
                    f"(components: {comps_sum})"
                )
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            it += 1
            epoch_loss["total"] += float(total.detach())
            for k in comps_sum:
                epoch_loss[k] += comps_sum[k] / len(samples)

        row = {
            "epoch": epoch,
            "lr": _lr_at(config, max(it - 1, 0), iters_per_epoch),
            "strong_aug": int(strong),
            **{f"loss_{k}": v / max(iters_per_epoch, 1) for k, v in epoch_loss.items()},
        }
        should_eval = val_cases and (
            (epoch + 1) % max(config.eval_interval, 1) == 0 or epoch == config.epochs - 1
        )
        if should_eval:
            metrics = evaluate_detector(
                detector, val_cases, score_thresh=config.score_thresh, nms_iou=config.nms_iou
            )
            row.update({f"val_{k}": v for k, v in metrics.items()})
            if metrics["ap50"] > best_ap50:
                best_ap50 = metrics["ap50"]
                best_epoch = epoch
                best_state = copy.deepcopy(detector.state_dict())
        history.append(row)
        if log:
            print(
                f"[stage1 epoch {epoch}] loss={row['loss_total']:.4f} "
                + (f"val_ap50={row.get('val_ap50', float('nan')):.3f}" if should_eval else "")
            )

    if best_epoch < 0:
        best_state = copy.deepcopy(detector.state_dict())
    if config.out_dir:
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        saved = copy.deepcopy(detector.state_dict())
        detector.load_state_dict(best_state)
        save_bundle(bundle, out / "stage1.npz")
        detector.load_state_dict(saved)
        if history:
            write_csv_rows(out / "stage1_history.csv", history)
    return Stage1Result(
        detector=detector,
        history=history,
        best_state=best_state,
        best_ap50=best_ap50,
        best_epoch=best_epoch,
        bundle=bundle,
    )


# ---------------------------------------------------------------------------
# Stage 2
# ---------------------------------------------------------------------------


@dataclass
class Stage2Result:
    aggregator: TemporalAggregator
    history: list[dict]
    best_state: dict
    best_accuracy: float
    best_f1: float
    best_case_accuracy: float


@dataclass
class ClipSample:
    tokens_cls: torch.Tensor  # (l*30, d)
    tokens_reg: torch.Tensor
    mask: torch.Tensor  # (l*30,)
    label: int
    case_id: str
    start: int


def cache_selected_features(
    detector: DetectionModel, cases: list[CaseRecord], batch_size: int = 16
) -> dict[str, tuple[torch.Tensor, torch.Tensor, torch.Tensor]]:
    """Frozen eval-mode per-frame selection, computed once per case."""
    detector.eval()
    cache = {}
    with torch.no_grad():
        for case in cases:
            f_cls_rows, f_reg_rows, mask_rows = [], [], []
            for lo in range(0, len(case.frames), batch_size):
                chunk = case.frames[lo : lo + batch_size]
                a, b = _batch_tensors([as_multibox(f) for f in chunk])
                pred = detector(a, b)
                for i in range(len(chunk)):
                    f_cls, f_reg, mask, _ = select_frame_features(pred, batch_index=i)
                    f_cls_rows.append(f_cls)
                    f_reg_rows.append(f_reg)
                    mask_rows.append(mask)
            cache[case.case_id] = (
                torch.stack(f_cls_rows),
                torch.stack(f_reg_rows),
                torch.stack(mask_rows),
            )
    return cache


def clips_from_cache(
    cache, cases: list[CaseRecord], clip_length: int, clip_interval: int
) -> list[ClipSample]:
    """Every valid clip window per case, flattened to token stacks."""
    clips = []
    for case in cases:
        f_cls, f_reg, mask = cache[case.case_id]
        num_frames = f_cls.shape[0]
        span = (clip_length - 1) * clip_interval
        for start in range(num_frames - span):
            idx = list(range(start, start + span + 1, clip_interval))
            clips.append(
                ClipSample(
                    tokens_cls=f_cls[idx].reshape(-1, f_cls.shape[-1]),
                    tokens_reg=f_reg[idx].reshape(-1, f_reg.shape[-1]),
                    mask=mask[idx].reshape(-1),
                    label=case.label_index,
                    case_id=case.case_id,
                    start=start,
                )
            )
    return clips


def _score_clips(aggregator: TemporalAggregator, clips: list[ClipSample], batch_size: int) -> np.ndarray:
    aggregator.eval()
    preds = []
    with torch.no_grad():
        for lo in range(0, len(clips), batch_size):
            chunk = clips[lo : lo + batch_size]
            logits = aggregator(
                torch.stack([c.tokens_cls for c in chunk]),
                torch.stack([c.tokens_reg for c in chunk]),
                torch.stack([c.mask for c in chunk]),
            )
            preds.extend(logits.argmax(dim=1).tolist())
    return np.array(preds)


def evaluate_clips(aggregator: TemporalAggregator, clips: list[ClipSample], batch_size: int = 64) -> dict:
    preds = _score_clips(aggregator, clips, batch_size)
    labels = np.array([c.label for c in clips])
    out = diagnosis_metrics(preds, labels)
    vote = majority_vote([c.case_id for c in clips], preds, labels)
    out["case_accuracy"] = vote["case_accuracy"]
    return out


def train_stage2(
    config: RunConfig,
    detector: DetectionModel,
    train_cases: list[CaseRecord],
    val_cases: list[CaseRecord],
    clip_length: int | None = None,
    clip_interval: int | None = None,
    cache=None,
    val_cache=None,
    log: bool = False,
) -> Stage2Result:
    """Train only the aggregation head on clips from the frozen detector."""
    length = clip_length or config.clip_length
    interval = clip_interval or config.clip_interval
    set_seed(config.seed + 1)

    for p in detector.parameters():
        if p.requires_grad:
            p.requires_grad_(False)
    detector.eval()
    if cache is None:
        cache = cache_selected_features(detector, train_cases)
    if val_cache is None:
        val_cache = cache_selected_features(detector, val_cases) if val_cases else {}

    train_clips = clips_from_cache(cache, train_cases, length, interval)
    val_clips = clips_from_cache(val_cache, val_cases, length, interval) if val_cases else []
    if not train_clips:
        raise ValueError(f"no valid clips for length={length} interval={interval}")

    aggregator = TemporalAggregator(d_head=config.d_head, num_classes=config.num_classes)
    optimizer = torch.optim.Adam(aggregator.parameters(), lr=config.stage2_lr)

    history: list[dict] = []
    best_state = copy.deepcopy(aggregator.state_dict())
    best = {"accuracy": -1.0, "f1": float("nan"), "case_accuracy": float("nan")}

    for epoch in range(config.stage2_epochs):
        aggregator.train()
        rng = _epoch_rng(config.seed, epoch, salt=1)
        order = rng.permutation(len(train_clips))
        epoch_loss = 0.0
        steps = 0
        for lo in range(0, len(order), config.stage2_batch_size):
            chunk = [train_clips[i] for i in order[lo : lo + config.stage2_batch_size]]
            logits = aggregator(
                torch.stack([c.tokens_cls for c in chunk]),
                torch.stack([c.tokens_reg for c in chunk]),
                torch.stack([c.mask for c in chunk]),
            )
            labels = torch.tensor([c.label for c in chunk])
            loss = F.cross_entropy(logits, labels)
            if not torch.isfinite(loss):
                raise RuntimeError(f"stage-2 training diverged at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach())
            steps += 1

        row = {"epoch": epoch, "loss": epoch_loss / max(steps, 1)}
        eval_clips = val_clips if val_clips else train_clips
        metrics = evaluate_clips(aggregator, eval_clips)
        row.update({f"val_{k}": v for k, v in metrics.items()})
        if metrics["accuracy"] > best["accuracy"]:
            best = metrics
            best_state = copy.deepcopy(aggregator.state_dict())
        history.append(row)
        if log:
            print(f"[stage2 l={length} i={interval} epoch {epoch}] "
                  f"loss={row['loss']:.4f} val_acc={row['val_accuracy']:.3f}")

    aggregator.load_state_dict(best_state)
    return Stage2Result(
        aggregator=aggregator,
        history=history,
        best_state=best_state,
        best_accuracy=best["accuracy"],
        best_f1=best["f1"],
        best_case_accuracy=best["case_accuracy"],
    )
