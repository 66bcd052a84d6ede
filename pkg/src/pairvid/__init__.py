"""Dual-modality video lesion detection and clip-level diagnosis.

The library covers the full desk-scale pipeline: a deterministic synthetic
paired-modality video generator, synchronized dual-modality augmentation,
a weight-sharing windowed-attention backbone, parallel cross/self-attention
fusion, an anchor-free decoupled detection head, confidence-based feature
selection, temporal aggregation over selected object features, two-stage
training, and from-scratch detection/diagnosis metrics.
"""

from pairvid.boxes import BBox, box_iou
from pairvid.data import CaseRecord, PairedFrame, VideoClip, enumerate_clips, sample_clip
from pairvid.datagen import SyntheticConfig, generate_case, generate_dataset, write_dataset
from pairvid.pipeline import ModelBundle, build_bundle, detect_frame, diagnose_clip, load_bundle, save_bundle
from pairvid.train import RunConfig, train_stage1, train_stage2

__version__ = "0.1.0"

__all__ = [
    "BBox",
    "box_iou",
    "SyntheticConfig",
    "CaseRecord",
    "generate_case",
    "generate_dataset",
    "write_dataset",
    "PairedFrame",
    "VideoClip",
    "sample_clip",
    "enumerate_clips",
    "ModelBundle",
    "build_bundle",
    "detect_frame",
    "diagnose_clip",
    "load_bundle",
    "save_bundle",
    "RunConfig",
    "train_stage1",
    "train_stage2",
]
