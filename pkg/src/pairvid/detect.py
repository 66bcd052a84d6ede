"""Anchor-free decoupled detection head: forward, assignment, loss, decoding, NMS.

Each pyramid level is reduced by a 1x1 stem to a shared head width, then two
parallel conv stacks produce classification and regression features; 1x1
predictors emit class logits, objectness, and box regression (center offsets
relative to the cell center plus log sizes, in stride units). The intermediate
cls/reg features are kept on the prediction object for downstream feature
selection.

Assignment is a fixed center-radius rule: a cell is positive iff its center
lies inside a ground-truth box and within 2.5 strides of the box center; ties
go to the closest box center. Confidence is objectness times the best class
probability, and NMS is greedy per class with deterministic (level, row, col)
tie-breaking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from pairvid.backbone import FeaturePyramid
from pairvid.boxes import BBox

D_HEAD = 64
CENTER_RADIUS = 2.5
NMS_IOU_DEFAULT = 0.65
SCORE_THRESH_EVAL = 0.01
LOSS_WEIGHTS = {"box": 5.0, "obj": 1.0, "cls": 1.0}


@dataclass
class GridPrediction:
    """Raw per-cell predictions for one batch, one entry per pyramid level."""

    cls_logits: list[torch.Tensor]  # (B, num_classes, H, W)
    objectness: list[torch.Tensor]  # (B, 1, H, W)
    box_reg: list[torch.Tensor]  # (B, 4, H, W): dx, dy, log w, log h
    cls_feat: list[torch.Tensor]  # (B, d_head, H, W)
    reg_feat: list[torch.Tensor]  # (B, d_head, H, W)
    strides: tuple[int, ...]
    input_hw: tuple[int, int]

    @property
    def num_classes(self) -> int:
        return self.cls_logits[0].shape[1]

    @property
    def batch_size(self) -> int:
        return self.cls_logits[0].shape[0]

    def level_sizes(self) -> list[tuple[int, int]]:
        return [tuple(t.shape[-2:]) for t in self.cls_logits]

    def total_cells(self) -> int:
        return sum(h * w for h, w in self.level_sizes())


@dataclass(frozen=True)
class DetectionBox:
    """One decoded detection in input-image pixels."""

    box: BBox
    cls: int
    score: float
    level: int
    cell: tuple[int, int]


def _conv_gn(in_ch: int, out_ch: int, kernel: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel, padding=kernel // 2),
        nn.GroupNorm(8, out_ch),
        nn.SiLU(),
    )


class DetectionHead(nn.Module):
    """Decoupled head over the fused pyramid; branches shared across levels."""

    def __init__(self, in_dims: tuple[int, ...], num_classes: int = 2, d_head: int = D_HEAD):
        super().__init__()
        self.num_classes = num_classes
        self.d_head = d_head
        self.stems = nn.ModuleList(_conv_gn(d, d_head, 1) for d in in_dims)
        self.cls_convs = nn.Sequential(_conv_gn(d_head, d_head, 3), _conv_gn(d_head, d_head, 3))
        self.reg_convs = nn.Sequential(_conv_gn(d_head, d_head, 3), _conv_gn(d_head, d_head, 3))
        self.cls_pred = nn.Conv2d(d_head, num_classes, 1)
        self.obj_pred = nn.Conv2d(d_head, 1, 1)
        self.box_pred = nn.Conv2d(d_head, 4, 1)
        # Rare-positive prior keeps early objectness/class probabilities low.
        prior = -math.log((1.0 - 0.01) / 0.01)
        nn.init.constant_(self.cls_pred.bias, prior)
        nn.init.constant_(self.obj_pred.bias, prior)

    def forward(self, fused: FeaturePyramid) -> GridPrediction:
        cls_logits, objectness, box_reg, cls_feats, reg_feats = [], [], [], [], []
        for stem, level in zip(self.stems, fused.levels):
            x = stem(level)
            cls_feat = self.cls_convs(x)
            reg_feat = self.reg_convs(x)
            cls_logits.append(self.cls_pred(cls_feat))
            objectness.append(self.obj_pred(reg_feat))
            box_reg.append(self.box_pred(reg_feat))
            cls_feats.append(cls_feat)
            reg_feats.append(reg_feat)
        return GridPrediction(
            cls_logits=cls_logits,
            objectness=objectness,
            box_reg=box_reg,
            cls_feat=cls_feats,
            reg_feat=reg_feats,
            strides=fused.strides,
            input_hw=fused.input_hw,
        )


# ---------------------------------------------------------------------------
# Target assignment
# ---------------------------------------------------------------------------


@dataclass
class AssignmentMap:
    """Per level: (H, W) int array of assigned gt index, -1 where negative."""

    assigned: list[np.ndarray]
    num_positives: int


def cell_centers(size_hw: tuple[int, int], stride: int) -> np.ndarray:
    """(H, W, 2) array of cell-center (x, y) image coordinates."""
    h, w = size_hw
    ys = (np.arange(h) + 0.5) * stride
    xs = (np.arange(w) + 0.5) * stride
    return np.stack(np.meshgrid(xs, ys), axis=-1)


def assign_targets(
    gt_boxes: list[BBox],
    level_sizes: list[tuple[int, int]],
    strides: tuple[int, ...] = (8, 16, 32),
) -> AssignmentMap:
    """Center-inside-box AND center-radius rule, closest box wins."""
    assigned = []
    num_pos = 0
    for (h, w), stride in zip(level_sizes, strides):
        amap = np.full((h, w), -1, dtype=np.int64)
        if gt_boxes:
            centers = cell_centers((h, w), stride)  # (H, W, 2)
            best_dist = np.full((h, w), np.inf)
            for gi, box in enumerate(gt_boxes):
                bx, by = box.center
                inside = (
                    (centers[..., 0] >= box.x_min)
                    & (centers[..., 0] <= box.x_max)
                    & (centers[..., 1] >= box.y_min)
                    & (centers[..., 1] <= box.y_max)
                )
                dist = np.hypot(centers[..., 0] - bx, centers[..., 1] - by)
                near = dist <= CENTER_RADIUS * stride
                better = inside & near & (dist < best_dist)
                amap[better] = gi
                best_dist[better] = dist[better]
        num_pos += int((amap >= 0).sum())
        assigned.append(amap)
    return AssignmentMap(assigned=assigned, num_positives=num_pos)


# ---------------------------------------------------------------------------
# Decoding, loss, NMS
# ---------------------------------------------------------------------------


def decode_level_boxes(box_reg: torch.Tensor, stride: int) -> torch.Tensor:
    """(B, 4, H, W) regression -> (B, H, W, 4) corner boxes in pixels."""
    b, _, h, w = box_reg.shape
    device, dtype = box_reg.device, box_reg.dtype
    cols = torch.arange(w, device=device, dtype=dtype)
    rows = torch.arange(h, device=device, dtype=dtype)
    grid_x = (cols[None, :] + 0.5) * stride
    grid_y = (rows[:, None] + 0.5) * stride
    cx = grid_x + box_reg[:, 0] * stride
    cy = grid_y + box_reg[:, 1] * stride
    bw = torch.exp(box_reg[:, 2]) * stride
    bh = torch.exp(box_reg[:, 3]) * stride
    return torch.stack([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2], dim=-1)


def _pairwise_iou_torch(boxes_a: torch.Tensor, boxes_b: torch.Tensor) -> torch.Tensor:
    ix = torch.clamp(
        torch.minimum(boxes_a[:, 2], boxes_b[:, 2]) - torch.maximum(boxes_a[:, 0], boxes_b[:, 0]),
        min=0.0,
    )
    iy = torch.clamp(
        torch.minimum(boxes_a[:, 3], boxes_b[:, 3]) - torch.maximum(boxes_a[:, 1], boxes_b[:, 1]),
        min=0.0,
    )
    inter = ix * iy
    area_a = (boxes_a[:, 2] - boxes_a[:, 0]) * (boxes_a[:, 3] - boxes_a[:, 1])
    area_b = (boxes_b[:, 2] - boxes_b[:, 0]) * (boxes_b[:, 3] - boxes_b[:, 1])
    return inter / (area_a + area_b - inter + 1e-12)


def detection_loss(
    pred: GridPrediction,
    gt_boxes: list[BBox],
    gt_classes: list[int],
    assignment: AssignmentMap | None = None,
    gt_weights: list[float] | None = None,
    batch_index: int = 0,
) -> dict[str, torch.Tensor]:
    """IoU + objectness-BCE + class-BCE, each normalized by clamp(positives, 1).

    Returns the components and their weighted total (weights 5/1/1).
    """
    if assignment is None:
        assignment = assign_targets(gt_boxes, pred.level_sizes(), pred.strides)
    if gt_weights is None:
        gt_weights = [1.0] * len(gt_boxes)

    device = pred.cls_logits[0].device
    dtype = pred.cls_logits[0].dtype
    zero = torch.zeros((), device=device, dtype=dtype)
    box_loss, cls_loss, obj_loss = zero.clone(), zero.clone(), zero.clone()
    norm = max(assignment.num_positives, 1)

    gt_arr = (
        torch.tensor(np.stack([b.as_array() for b in gt_boxes]), device=device, dtype=dtype)
        if gt_boxes
        else torch.zeros((0, 4), device=device, dtype=dtype)
    )
    weight_arr = torch.tensor(gt_weights, device=device, dtype=dtype) if gt_boxes else None

    for li, (amap, stride) in enumerate(zip(assignment.assigned, pred.strides)):
        obj_logit = pred.objectness[li][batch_index, 0]
        pos = torch.from_numpy(amap >= 0).to(device)
        obj_target = pos.to(dtype)
        obj_loss = obj_loss + F.binary_cross_entropy_with_logits(
            obj_logit, obj_target, reduction="sum"
        )
        if not pos.any():
            continue
        rows, cols = torch.nonzero(pos, as_tuple=True)
        gt_idx = torch.from_numpy(amap).to(device)[rows, cols]
        weights = weight_arr[gt_idx]

        decoded = decode_level_boxes(pred.box_reg[li][batch_index : batch_index + 1], stride)[0]
        iou = _pairwise_iou_torch(decoded[rows, cols], gt_arr[gt_idx])
        box_loss = box_loss + ((1.0 - iou) * weights).sum()

        cls_logit = pred.cls_logits[li][batch_index].permute(1, 2, 0)[rows, cols]
        target = F.one_hot(
            torch.tensor([gt_classes[i] for i in gt_idx.tolist()], device=device),
            num_classes=pred.num_classes,
        ).to(dtype)
        per_cell = F.binary_cross_entropy_with_logits(cls_logit, target, reduction="none").sum(-1)
        cls_loss = cls_loss + (per_cell * weights).sum()

    components = {
        "box": box_loss / norm,
        "obj": obj_loss / norm,
        "cls": cls_loss / norm,
    }
    components["total"] = (
        LOSS_WEIGHTS["box"] * components["box"]
        + LOSS_WEIGHTS["obj"] * components["obj"]
        + LOSS_WEIGHTS["cls"] * components["cls"]
    )
    return components


def greedy_nms(
    boxes: np.ndarray, scores: np.ndarray, order_keys: list[tuple], iou_thresh: float
) -> list[int]:
    """Indices of survivors; candidates visited by descending score with
    (level, row, col) lexicographic tie-breaking."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], order_keys[i]))
    keep: list[int] = []
    for i in order:
        suppressed = False
        for j in keep:
            if _iou_np(boxes[i], boxes[j]) > iou_thresh:
                suppressed = True
                break
        if not suppressed:
            keep.append(i)
    return keep


def _iou_np(a: np.ndarray, b: np.ndarray) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return float(inter / (area_a + area_b - inter))


def flatten_cells(pred: GridPrediction, batch_index: int = 0):
    """All cells of one sample: scores, classes, boxes, (level, row, col) keys.

    Score composition: sigmoid(objectness) * max over classes of sigmoid(cls).
    """
    scores, classes, boxes, keys = [], [], [], []
    for li, stride in enumerate(pred.strides):
        obj = torch.sigmoid(pred.objectness[li][batch_index, 0])
        cls_prob = torch.sigmoid(pred.cls_logits[li][batch_index])
        best_prob, best_cls = cls_prob.max(dim=0)
        score = obj * best_prob
        decoded = decode_level_boxes(pred.box_reg[li][batch_index : batch_index + 1], stride)[0]
        h, w = score.shape
        scores.append(score.reshape(-1).detach().cpu().numpy())
        classes.append(best_cls.reshape(-1).detach().cpu().numpy())
        boxes.append(decoded.reshape(-1, 4).detach().cpu().numpy())
        rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        keys.extend([(li, int(r), int(c)) for r, c in zip(rr.ravel(), cc.ravel())])
    return (
        np.concatenate(scores),
        np.concatenate(classes),
        np.concatenate(boxes),
        keys,
    )


def decode_and_nms(
    pred: GridPrediction,
    score_thresh: float = SCORE_THRESH_EVAL,
    iou_thresh: float = NMS_IOU_DEFAULT,
    batch_index: int = 0,
) -> list[DetectionBox]:
    """Thresholded, per-class NMS'd detections in descending score order."""
    if not 0.0 <= score_thresh <= 1.0 or not 0.0 <= iou_thresh <= 1.0:
        raise ValueError("thresholds must lie in [0, 1]")
    scores, classes, boxes, keys = flatten_cells(pred, batch_index)
    keep_mask = scores >= score_thresh
    detections: list[DetectionBox] = []
    for cls in np.unique(classes[keep_mask]):
        sel = np.nonzero(keep_mask & (classes == cls))[0]
        survivors = greedy_nms(
            boxes[sel], scores[sel], [keys[i] for i in sel], iou_thresh
        )
        for local in survivors:
            i = sel[local]
            x0, y0, x1, y1 = boxes[i]
            if x1 <= x0 or y1 <= y0:
                continue
            detections.append(
                DetectionBox(
                    box=BBox(float(x0), float(y0), float(x1), float(y1)),
                    cls=int(cls),
                    score=float(scores[i]),
                    level=keys[i][0],
                    cell=(keys[i][1], keys[i][2]),
                )
            )
    detections.sort(key=lambda d: (-d.score, d.level, d.cell))
    return detections
