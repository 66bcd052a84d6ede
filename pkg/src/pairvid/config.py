"""Run configuration files: flat key-value INI with sections.

Sections: [dataset] feeds the synthetic generator, [model]/[train]/[stage2]/
[eval] feed RunConfig. Unknown keys are rejected so typos fail loudly;
environment variables are never consulted.
"""

from __future__ import annotations

import configparser
from pathlib import Path

from pairvid.datagen import SyntheticConfig
from pairvid.train import RunConfig

DATASET_KEYS = {
    "image_size": int,
    "num_cases": int,
    "frames_per_case": int,
    "tumor_radius_min": float,
    "tumor_radius_max": float,
    "noise_sigma": float,
    "malignant_fraction": float,
    "cue_mode": str,
    "seed": int,
    "split_train": float,
    "split_val": float,
    "split_test": float,
}

MODEL_KEYS = {
    "image_size": int,
    "fusion": str,
    "d_head": int,
    "num_classes": int,
    "patch_size": int,
    "stage_dims": "int_tuple",
    "blocks_per_stage": "int_tuple",
    "attention_window": int,
}

TRAIN_KEYS = {
    "epochs": int,
    "batch_size": int,
    "lr": float,
    "momentum": float,
    "weight_decay": float,
    "warmup_epochs": int,
    "no_aug_epochs": int,
    "mosaic_prob": float,
    "mixup_prob": float,
    "max_angle": float,
    "eval_interval": int,
    "seed": int,
}

STAGE2_KEYS = {
    "clip_length": int,
    "clip_interval": int,
    "epochs": int,
    "lr": float,
    "batch_size": int,
}

EVAL_KEYS = {
    "score_thresh": float,
    "nms_iou": float,
}

_SECTIONS = {
    "dataset": DATASET_KEYS,
    "model": MODEL_KEYS,
    "train": TRAIN_KEYS,
    "stage2": STAGE2_KEYS,
    "eval": EVAL_KEYS,
}


class ConfigFileError(ValueError):
    """Raised for unreadable files, unknown sections/keys, or bad values."""


def _convert(section: str, key: str, raw: str, kind):
    try:
        if kind == "int_tuple":
            return tuple(int(v.strip()) for v in raw.split(","))
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw.strip()
    except ValueError as exc:
        raise ConfigFileError(f"[{section}] {key}: cannot parse {raw!r}") from exc


def parse_config_file(path: str | Path) -> dict[str, dict]:
    path = Path(path)
    if not path.exists():
        raise ConfigFileError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigFileError(f"cannot parse {path}: {exc}") from exc

    out: dict[str, dict] = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigFileError(f"unknown section [{section}] in {path}")
        schema = _SECTIONS[section]
        values = {}
        for key, raw in parser.items(section):
            if key not in schema:
                raise ConfigFileError(f"unknown key {key!r} in [{section}] of {path}")
            values[key] = _convert(section, key, raw, schema[key])
        out[section] = values
    return out


def synthetic_config_from(sections: dict, seed: int | None = None) -> tuple[SyntheticConfig, tuple]:
    """SyntheticConfig plus split fractions from the [dataset] section."""
    d = dict(sections.get("dataset", {}))
    fractions = (
        d.pop("split_train", 0.6),
        d.pop("split_val", 0.2),
        d.pop("split_test", 0.2),
    )
    rmin = d.pop("tumor_radius_min", 12.0)
    rmax = d.pop("tumor_radius_max", 20.0)
    if seed is not None:
        d["seed"] = seed
    cfg = SyntheticConfig(tumor_radius_range=(rmin, rmax), **d)
    return cfg, fractions


def run_config_from(
    sections: dict,
    data_root: str = "",
    out_dir: str = "",
    seed: int | None = None,
) -> RunConfig:
    """RunConfig from the [model]/[train]/[stage2]/[eval] sections."""
    kw: dict = {}
    kw.update(sections.get("model", {}))
    kw.update(sections.get("train", {}))
    stage2 = sections.get("stage2", {})
    for src, dst in (
        ("clip_length", "clip_length"),
        ("clip_interval", "clip_interval"),
        ("epochs", "stage2_epochs"),
        ("lr", "stage2_lr"),
        ("batch_size", "stage2_batch_size"),
    ):
        if src in stage2:
            kw[dst] = stage2[src]
    kw.update(sections.get("eval", {}))
    if data_root:
        kw["data_root"] = str(data_root)
    if out_dir:
        kw["out_dir"] = str(out_dir)
    if seed is not None:
        kw["seed"] = seed
    return RunConfig(**kw)
