"""Dataset ingestion, synchronized dual-modality augmentation, and clip sampling."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from pairvid.boxes import BBox, clip_box

CLASS_NAMES = ("benign", "malignant")

MIN_BOX_SIDE = 2.0


@dataclass
class PairedFrame:
    """One co-registered frame pair with its single annotation."""

    image_a: np.ndarray
    image_b: np.ndarray
    box: BBox
    cls: int
    frame_index: int

    def __post_init__(self):
        if self.image_a.shape != self.image_b.shape:
            raise ValueError(
                f"modality shapes differ: {self.image_a.shape} vs {self.image_b.shape}"
            )


@dataclass
class CaseRecord:
    """An ordered sequence of frames sharing one diagnosis and acquisition site."""

    case_id: str
    label: str
    frames: list[PairedFrame]
    center_id: str
    # Cue bits used to build a synthetic case; retained for cue-privacy
    # analysis only, never written to disk.
    shape_bit: int = 0
    texture_bit: int = 0

    @property
    def label_index(self) -> int:
        return CLASS_NAMES.index(self.label)


@dataclass
class MultiBoxFrame:
    """Augmentation-side frame carrying several annotations with loss weights.

    Mosaic montages hold up to four boxes and mixup blends keep the union of
    both sources, so the single-annotation PairedFrame contract does not fit
    the strong-augmentation path.
    """

    image_a: np.ndarray
    image_b: np.ndarray
    boxes: list[BBox]
    classes: list[int]
    weights: list[float]


def as_multibox(frame: PairedFrame | MultiBoxFrame) -> MultiBoxFrame:
    if isinstance(frame, MultiBoxFrame):
        return frame
    return MultiBoxFrame(
        image_a=frame.image_a,
        image_b=frame.image_b,
        boxes=[frame.box],
        classes=[frame.cls],
        weights=[1.0],
    )


@dataclass
class VideoClip:
    """l frames sampled forward from a case at a fixed interval."""

    frames: list[PairedFrame]
    length: int
    interval: int
    label: int
    case_id: str = ""
    start: int = 0

    def __post_init__(self):
        if len(self.frames) != self.length:
            raise ValueError(f"clip has {len(self.frames)} frames, expected {self.length}")


# ---------------------------------------------------------------------------
# On-disk ingestion (layout written by pairvid.datagen)
# ---------------------------------------------------------------------------


def load_manifest(root: str | Path) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json under {root}")
    return json.loads(path.read_text())


def _load_gray(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path), dtype=np.float64)
    return (arr / 255.0).astype(np.float32)


def load_case(root: str | Path, row: dict) -> CaseRecord:
    """Load one case given its manifest row."""
    root = Path(root)
    case_dir = root / row["case_id"]
    frames = []
    for i in range(row["num_frames"]):
        meta = json.loads((case_dir / f"frame_{i}.json").read_text())
        frames.append(
            PairedFrame(
                image_a=_load_gray(case_dir / f"frame_{i}_A.png"),
                image_b=_load_gray(case_dir / f"frame_{i}_B.png"),
                box=BBox.from_array(meta["box"]),
                cls=CLASS_NAMES.index(meta["label"]),
                frame_index=i,
            )
        )
    return CaseRecord(
        case_id=row["case_id"],
        label=row["label"],
        frames=frames,
        center_id=row["center_id"],
    )


def load_split(root: str | Path, split: str) -> list[CaseRecord]:
    """Load every case of a split ('train', 'val' or 'test')."""
    manifest = load_manifest(root)
    if split not in manifest["splits"]:
        raise KeyError(f"unknown split {split!r}; have {sorted(manifest['splits'])}")
    rows = {row["case_id"]: row for row in manifest["cases"]}
    return [load_case(root, rows[cid]) for cid in manifest["splits"][split]]


# ---------------------------------------------------------------------------
# Clip sampling
# ---------------------------------------------------------------------------


def sample_clip(case: CaseRecord, start: int, length: int, interval: int) -> VideoClip:
    """Frames at indices start, start+interval, ... (length of them)."""
    if length < 1 or interval < 1:
        raise ValueError(f"length and interval must be >= 1, got {length}, {interval}")
    last = start + (length - 1) * interval
    if start < 0 or last >= len(case.frames):
        raise IndexError(
            f"clip window [{start}, {last}] out of range for case with {len(case.frames)} frames"
        )
    frames = [case.frames[start + k * interval] for k in range(length)]
    return VideoClip(
        frames=frames,
        length=length,
        interval=interval,
        label=case.label_index,
        case_id=case.case_id,
        start=start,
    )


def enumerate_clips(case: CaseRecord, length: int, interval: int) -> list[VideoClip]:
    """All clips with valid start positions, in start order."""
    span = (length - 1) * interval
    return [sample_clip(case, s, length, interval) for s in range(len(case.frames) - span)]


# ---------------------------------------------------------------------------
# Synchronized augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentParams:
    """One sampled augmentation. Geometry is shared by both modalities;
    photometric jitter is per modality."""

    angle_deg: float = 0.0
    flip_h: bool = False
    scale: float = 1.0
    translate: tuple[float, float] = (0.0, 0.0)
    brightness_a: float = 0.0
    contrast_a: float = 1.0
    brightness_b: float = 0.0
    contrast_b: float = 1.0


def sample_augment_params(
    rng: np.random.Generator,
    max_angle: float = 10.0,
    scale_range: tuple[float, float] = (0.9, 1.1),
    translate_frac: float = 0.05,
    flip_prob: float = 0.5,
    brightness_delta: float = 0.1,
    contrast_range: tuple[float, float] = (0.9, 1.1),
    image_size: int = 128,
) -> AugmentParams:
    """Draw one parameter set; call once per frame pair, never per modality."""
    t = translate_frac * image_size
    return AugmentParams(
        angle_deg=float(rng.uniform(-max_angle, max_angle)),
        flip_h=bool(rng.random() < flip_prob),
        scale=float(rng.uniform(*scale_range)),
        translate=(float(rng.uniform(-t, t)), float(rng.uniform(-t, t))),
        brightness_a=float(rng.uniform(-brightness_delta, brightness_delta)),
        contrast_a=float(rng.uniform(*contrast_range)),
        brightness_b=float(rng.uniform(-brightness_delta, brightness_delta)),
        contrast_b=float(rng.uniform(*contrast_range)),
    )


def affine_matrix(params: AugmentParams, width: int, height: int) -> np.ndarray:
    """2x3 matrix of the geometric transform (flip, then rotate+scale about the
    image center, then translate) shared by both modalities.

    Coordinates are continuous box coordinates: the image spans [0, W] x [0, H]
    and pixel (i, j) covers [i, i+1) x [j, j+1).
    """
    theta = np.deg2rad(params.angle_deg)
    rot = params.scale * np.array(
        [[np.cos(theta), np.sin(theta)], [-np.sin(theta), np.cos(theta)]]
    )
    a = rot @ (np.diag([-1.0, 1.0]) if params.flip_h else np.eye(2))
    center = np.array([width / 2.0, height / 2.0])
    pre = np.array([float(width), 0.0]) if params.flip_h else np.zeros(2)
    # x -> A (x_flipped - center) + center + translate, with the flip folded into A.
    t = rot @ (pre - center) + center + np.asarray(params.translate)
    return np.hstack([a, t[:, None]])


def _index_matrix(m_cont: np.ndarray) -> np.ndarray:
    """Continuous-coordinate affine -> cv2's pixel-index convention (centers at
    integer coordinates, i.e. shifted by half a pixel)."""
    a = m_cont[:, :2]
    half = np.array([0.5, 0.5])
    t = a @ half + m_cont[:, 2] - half
    return np.hstack([a, t[:, None]]).astype(np.float64)


def _warp_box(box: BBox, m: np.ndarray) -> BBox:
    corners = np.array(
        [
            [box.x_min, box.y_min],
            [box.x_max, box.y_min],
            [box.x_min, box.y_max],
            [box.x_max, box.y_max],
        ]
    )
    warped = corners @ m[:, :2].T + m[:, 2]
    return BBox(
        float(warped[:, 0].min()),
        float(warped[:, 1].min()),
        float(warped[:, 0].max()),
        float(warped[:, 1].max()),
    )


def augment_pair(
    pair: PairedFrame | MultiBoxFrame, params: AugmentParams
) -> MultiBoxFrame | None:
    """Apply one augmentation to both modalities.

    Returns None when every annotation is pushed (fully or almost fully)
    outside the frame, signalling that the sample should be dropped.
    """
    frame = as_multibox(pair)
    h, w = frame.image_a.shape
    m = affine_matrix(params, w, h)
    m_idx = _index_matrix(m)

    warped = []
    for img in (frame.image_a, frame.image_b):
        out = cv2.warpAffine(
            img,
            m_idx,
            (w, h),
            flags=cv2.INTER_LINEAR,
            borderMode=cv2.BORDER_REFLECT_101,
        )
        warped.append(out)
    image_a, image_b = warped

    image_a = np.clip(image_a * params.contrast_a + params.brightness_a, 0.0, 1.0)
    image_b = np.clip(image_b * params.contrast_b + params.brightness_b, 0.0, 1.0)

    boxes, classes, weights = [], [], []
    for box, cls, weight in zip(frame.boxes, frame.classes, frame.weights):
        kept = clip_box(_warp_box(box, m), w, h, MIN_BOX_SIDE)
        if kept is not None:
            boxes.append(kept)
            classes.append(cls)
            weights.append(weight)
    if not boxes:
        return None
    return MultiBoxFrame(image_a=image_a, image_b=image_b, boxes=boxes, classes=classes, weights=weights)


def mosaic(
    pairs: list[PairedFrame | MultiBoxFrame],
    center: tuple[float, float] | None = None,
    rng: np.random.Generator | None = None,
) -> MultiBoxFrame:
    """2x2 montage of four frames at the original resolution.

    The split point is jittered inside the central 50% region (or given
    explicitly); both modalities share the identical layout. Boxes are scaled
    into their quadrant and degenerate clipped boxes are dropped.
    """
    if len(pairs) != 4:
        raise ValueError(f"mosaic needs exactly 4 frames, got {len(pairs)}")
    frames = [as_multibox(p) for p in pairs]
    h, w = frames[0].image_a.shape
    for f in frames:
        if f.image_a.shape != (h, w):
            raise ValueError("mosaic inputs must share one image size")
    if center is None:
        if rng is None:
            rng = np.random.default_rng()
        center = (float(rng.uniform(0.25 * w, 0.75 * w)), float(rng.uniform(0.25 * h, 0.75 * h)))
    cx = int(round(center[0]))
    cy = int(round(center[1]))
    if not (0 < cx < w and 0 < cy < h):
        raise ValueError(f"mosaic center {center} outside image")

    out_a = np.zeros((h, w), dtype=np.float32)
    out_b = np.zeros((h, w), dtype=np.float32)
    boxes, classes, weights = [], [], []
    quadrants = [  # (x0, y0, x1, y1) destination rects
        (0, 0, cx, cy),
        (cx, 0, w, cy),
        (0, cy, cx, h),
        (cx, cy, w, h),
    ]
    for frame, (x0, y0, x1, y1) in zip(frames, quadrants):
        qw, qh = x1 - x0, y1 - y0
        if qw < 1 or qh < 1:
            continue
        out_a[y0:y1, x0:x1] = cv2.resize(frame.image_a, (qw, qh), interpolation=cv2.INTER_LINEAR)
        out_b[y0:y1, x0:x1] = cv2.resize(frame.image_b, (qw, qh), interpolation=cv2.INTER_LINEAR)
        sx, sy = qw / w, qh / h
        for box, cls, weight in zip(frame.boxes, frame.classes, frame.weights):
            moved = BBox(
                box.x_min * sx + x0,
                box.y_min * sy + y0,
                box.x_max * sx + x0,
                box.y_max * sy + y0,
            )
            kept = clip_box(moved, w, h, MIN_BOX_SIDE)
            if kept is None:
                continue
            boxes.append(kept)
            classes.append(cls)
            weights.append(weight)
    return MultiBoxFrame(image_a=out_a, image_b=out_b, boxes=boxes, classes=classes, weights=weights)


def mixup(
    pair1: PairedFrame | MultiBoxFrame,
    pair2: PairedFrame | MultiBoxFrame,
    lam: float,
) -> MultiBoxFrame:
    """Convex pixel blend with the same lambda on both modalities.

    Keeps the union of boxes with their original classes; per-box loss weight
    is the source's lambda share.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    f1, f2 = as_multibox(pair1), as_multibox(pair2)
    if f1.image_a.shape != f2.image_a.shape:
        raise ValueError("mixup inputs must share one image size")
    image_a = lam * f1.image_a + (1.0 - lam) * f2.image_a
    image_b = lam * f1.image_b + (1.0 - lam) * f2.image_b
    return MultiBoxFrame(
        image_a=image_a.astype(np.float32),
        image_b=image_b.astype(np.float32),
        boxes=list(f1.boxes) + list(f2.boxes),
        classes=list(f1.classes) + list(f2.classes),
        weights=[lam * w for w in f1.weights] + [(1.0 - lam) * w for w in f2.weights],
    )
