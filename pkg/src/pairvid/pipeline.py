"""End-to-end composition: paired frames -> detections, clips -> diagnosis.

The model bundle holds the frozen single-frame detector (backbone + fusion +
head), the temporal aggregation head, a config echo, and a schema version.
Bundles are stored as a single np.savez archive of named parameter arrays plus
a JSON meta blob, so checkpoints stay framework-agnostic and diffable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from pairvid.backbone import BackboneConfig, DualBranchBackbone
from pairvid.data import PairedFrame, VideoClip
from pairvid.detect import DetectionBox, DetectionHead, GridPrediction, decode_and_nms
from pairvid.fusion import build_fusion
from pairvid.selection import SelectedFeatureSet, select_frame_features
from pairvid.temporal import ClipDiagnosis, TemporalAggregator, classify_clip

BUNDLE_SCHEMA_VERSION = 1


class DetectionModel(nn.Module):
    """Single-frame path: shared dual-branch backbone, fusion block, head."""

    def __init__(
        self,
        backbone_config: BackboneConfig | None = None,
        fusion_kind: str = "dual_attention",
        num_classes: int = 2,
        d_head: int = 64,
    ):
        super().__init__()
        self.backbone = DualBranchBackbone(backbone_config)
        self.fusion_kind = fusion_kind
        self.fusion = build_fusion(fusion_kind, self.backbone.out_dims)
        self.head = DetectionHead(self.backbone.out_dims, num_classes=num_classes, d_head=d_head)

    def forward(self, image_a: torch.Tensor, image_b: torch.Tensor) -> GridPrediction:
        pyr_a, pyr_b = self.backbone.extract_pair(image_a, image_b)
        return self.head(self.fusion(pyr_a, pyr_b))


@dataclass
class ModelBundle:
    """Everything needed for inference, plus provenance."""

    detector: DetectionModel
    aggregator: TemporalAggregator
    config: dict = field(default_factory=dict)
    schema_version: int = BUNDLE_SCHEMA_VERSION

    def eval(self) -> "ModelBundle":
        self.detector.eval()
        self.aggregator.eval()
        return self


def frames_to_tensors(frames: list[PairedFrame]) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack frames into (B, 1, H, W) float tensors, one per modality."""
    a = torch.from_numpy(np.stack([f.image_a for f in frames])[:, None].astype(np.float32))
    b = torch.from_numpy(np.stack([f.image_b for f in frames])[:, None].astype(np.float32))
    return a, b


def detect_frame(
    bundle: ModelBundle,
    pair: PairedFrame,
    score_thresh: float | None = None,
    iou_thresh: float | None = None,
) -> list[DetectionBox]:
    """Full single-frame path in eval mode; deterministic."""
    bundle.eval()
    a, b = frames_to_tensors([pair])
    expected = bundle.config.get("image_size")
    if expected and a.shape[-2:] != (expected, expected):
        raise ValueError(f"frame size {tuple(a.shape[-2:])} does not match model size {expected}")
    kwargs = {}
    if score_thresh is not None:
        kwargs["score_thresh"] = score_thresh
    if iou_thresh is not None:
        kwargs["iou_thresh"] = iou_thresh
    with torch.no_grad():
        pred = bundle.detector(a, b)
    return decode_and_nms(pred, **kwargs)


def clip_features(bundle: ModelBundle, clip: VideoClip) -> SelectedFeatureSet:
    """Frozen detector forward over the clip's frames plus feature selection."""
    bundle.eval()
    a, b = frames_to_tensors(clip.frames)
    with torch.no_grad():
        pred = bundle.detector(a, b)
    stacks = [
        select_frame_features(pred, batch_index=i, frame_index=i)
        for i in range(len(clip.frames))
    ]
    return SelectedFeatureSet(
        f_cls=torch.stack([s[0] for s in stacks]),
        f_reg=torch.stack([s[1] for s in stacks]),
        mask=torch.stack([s[2] for s in stacks]),
        provenance=[s[3] for s in stacks],
    )


def diagnose_clip(bundle: ModelBundle, clip: VideoClip) -> ClipDiagnosis:
    """FSM over per-frame predictions, then temporal aggregation."""
    sel = clip_features(bundle, clip)
    if sel.num_valid == 0:
        raise ValueError("insufficient evidence: no valid selected slots in clip")
    return classify_clip(sel, bundle.aggregator)


# ---------------------------------------------------------------------------
# Named-array checkpoint archive
# ---------------------------------------------------------------------------


def _state_to_arrays(module: nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {
        f"{prefix}/{name}": tensor.detach().cpu().numpy()
        for name, tensor in module.state_dict().items()
    }


def _load_state_from_arrays(module: nn.Module, archive, prefix: str) -> None:
    state = {}
    for key in archive.files:
        if key.startswith(prefix + "/"):
            state[key[len(prefix) + 1 :]] = torch.from_numpy(np.array(archive[key]))
    module.load_state_dict(state)


def build_bundle(config: dict) -> ModelBundle:
    """Fresh bundle from a config echo (see RunConfig.to_model_config)."""
    backbone_cfg = BackboneConfig(
        patch_size=config.get("patch_size", 4),
        stage_dims=tuple(config.get("stage_dims", (32, 64, 128))),
        blocks_per_stage=tuple(config.get("blocks_per_stage", (1, 1, 2))),
        attention_window=config.get("attention_window", 4),
    )
    detector = DetectionModel(
        backbone_cfg,
        fusion_kind=config.get("fusion", "dual_attention"),
        num_classes=config.get("num_classes", 2),
        d_head=config.get("d_head", 64),
    )
    aggregator = TemporalAggregator(
        d_head=config.get("d_head", 64), num_classes=config.get("num_classes", 2)
    )
    return ModelBundle(detector=detector, aggregator=aggregator, config=dict(config))


def save_bundle(bundle: ModelBundle, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = _state_to_arrays(bundle.detector, "detector")
    arrays.update(_state_to_arrays(bundle.aggregator, "aggregator"))
    meta = {"schema_version": bundle.schema_version, "config": bundle.config}
    np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_bundle(path: str | Path) -> ModelBundle:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    archive = np.load(path, allow_pickle=False)
    meta = json.loads(bytes(archive["__meta__"]).decode())
    if meta.get("schema_version") != BUNDLE_SCHEMA_VERSION:
        raise ValueError(
            f"checkpoint schema {meta.get('schema_version')} unsupported "
            f"(expected {BUNDLE_SCHEMA_VERSION})"
        )
    bundle = build_bundle(meta["config"])
    _load_state_from_arrays(bundle.detector, archive, "detector")
    _load_state_from_arrays(bundle.aggregator, archive, "aggregator")
    bundle.schema_version = meta["schema_version"]
    return bundle.eval()


def parameter_checksum(module: nn.Module) -> str:
    """Order-stable digest of every parameter and buffer byte."""
    import hashlib

    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()
