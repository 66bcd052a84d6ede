"""Confidence-based selection of grid-cell features for temporal aggregation.

Per frame: rank all cells of all three pyramid levels jointly by confidence,
keep the top 750, reduce redundancy with greedy class-agnostic NMS over the
decoded boxes, keep the first 30 survivors, and gather the cls/reg head
feature vectors at the kept cells. Frames with fewer than 30 survivors are
zero-padded with a false mask so padding injects no duplicate evidence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from pairvid.boxes import BBox
from pairvid.detect import GridPrediction, flatten_cells, greedy_nms

TOP_CELLS = 750
KEEP_SLOTS = 30
SELECT_NMS_IOU = 0.65


@dataclass(frozen=True)
class SlotProvenance:
    """Where one selected slot came from."""

    frame: int
    level: int
    cell: tuple[int, int]
    score: float
    box: BBox


@dataclass
class SelectedFeatureSet:
    """Per-clip selected features: (l, k, d) cls and reg stacks plus validity mask."""

    f_cls: torch.Tensor  # (l, KEEP_SLOTS, d_head)
    f_reg: torch.Tensor  # (l, KEEP_SLOTS, d_head)
    mask: torch.Tensor  # (l, KEEP_SLOTS) bool
    provenance: list[list[SlotProvenance]]

    @property
    def num_frames(self) -> int:
        return self.f_cls.shape[0]

    @property
    def num_valid(self) -> int:
        return int(self.mask.sum())


def select_frame_features(
    pred: GridPrediction,
    batch_index: int = 0,
    frame_index: int = 0,
    top_cells: int = TOP_CELLS,
    keep_slots: int = KEEP_SLOTS,
    iou_thresh: float = SELECT_NMS_IOU,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, list[SlotProvenance]]:
    """One frame's (k, d) cls features, (k, d) reg features, mask, provenance."""
    scores, _, boxes, keys = flatten_cells(pred, batch_index)

    order = sorted(range(len(scores)), key=lambda i: (-scores[i], keys[i]))
    top = order[: min(top_cells, len(order))]

    survivors = greedy_nms(
        boxes[top], scores[top], [keys[i] for i in top], iou_thresh
    )
    kept = [top[i] for i in survivors[: min(keep_slots, len(survivors))]]

    d_head = pred.cls_feat[0].shape[1]
    f_cls = torch.zeros(keep_slots, d_head, dtype=pred.cls_feat[0].dtype)
    f_reg = torch.zeros(keep_slots, d_head, dtype=pred.reg_feat[0].dtype)
    mask = torch.zeros(keep_slots, dtype=torch.bool)
    provenance: list[SlotProvenance] = []
    for slot, i in enumerate(kept):
        level, row, col = keys[i]
        f_cls[slot] = pred.cls_feat[level][batch_index, :, row, col]
        f_reg[slot] = pred.reg_feat[level][batch_index, :, row, col]
        mask[slot] = True
        x0, y0, x1, y1 = boxes[i]
        x1 = max(x1, x0 + 1e-6)
        y1 = max(y1, y0 + 1e-6)
        provenance.append(
            SlotProvenance(
                frame=frame_index,
                level=level,
                cell=(row, col),
                score=float(scores[i]),
                box=BBox(float(x0), float(y0), float(x1), float(y1)),
            )
        )
    return f_cls, f_reg, mask, provenance


def build_clip_features(frame_preds: list[GridPrediction]) -> SelectedFeatureSet:
    """Stack per-frame selections in frame order."""
    if not frame_preds:
        raise ValueError("empty clip: need at least one frame prediction")
    stacks = [
        select_frame_features(pred, frame_index=i) for i, pred in enumerate(frame_preds)
    ]
    return SelectedFeatureSet(
        f_cls=torch.stack([s[0] for s in stacks]),
        f_reg=torch.stack([s[1] for s in stacks]),
        mask=torch.stack([s[2] for s in stacks]),
        provenance=[s[3] for s in stacks],
    )
