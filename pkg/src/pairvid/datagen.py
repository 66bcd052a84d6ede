"""Deterministic synthetic paired-modality video generator.

Each case is a short two-modality clip (a static anatomy-like channel A and a
perfusion-like channel B) with exactly one lesion per frame. The class label is
recoverable only through the configured cue:

* ``joint_modal`` — modality A carries a shape bit (solid vs hollow disc
  silhouette), modality B carries a texture bit (solid vs ring fill), and the
  label is the XOR of the two bits. Either modality alone is provably
  uninformative. Both cues are visible right at the lesion center so
  center-assigned grid cells can read them locally.
* ``temporal`` — both classes share identical static appearance; the label is
  encoded in the enhancement level trajectory of modality B. Benign cases sit
  on a narrow slow ramp around a case-specific plateau drawn uniformly from the
  level range, malignant cases sweep the full range with a fast wash-in /
  wash-out tent. Any single frame is therefore near-uninformative while the
  set of levels across a clip separates the classes.
* ``both`` — both cues active and consistent with the label.

Cases are pure functions of (config, case_index), so generation parallelizes
and identical (config, seed) pairs produce byte-identical datasets on disk.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image

from pairvid.boxes import BBox
from pairvid.data import CLASS_NAMES, CaseRecord, PairedFrame

SCHEMA_VERSION = 1

CUE_MODES = ("joint_modal", "temporal", "both")

# Gray levels of the scene building blocks (all in [0, 1]).
BACKGROUND_A = 0.42
BACKGROUND_B = 0.30
TUMOR_A = 0.08
HOLE_RADIUS_FRACTION = 0.55
RING_CORE_B = 0.12
JOINT_ENHANCEMENT = 0.78

# Enhancement-curve constants (temporal cue).
LEVEL_LO = 0.15
LEVEL_HI = 0.85
BENIGN_RAMP_SPAN = 0.10

# Appearance shift applied to simulated acquisition site "A".
CENTER_A_GAMMA = 1.3
CENTER_IDS = ("A", "B", "C")
CENTER_A_FRACTION = 0.2

MAX_CENTER_STEP = 2.0


class ConfigError(ValueError):
    """Raised when a SyntheticConfig field is out of range; names the field."""


@dataclass(frozen=True)
class SyntheticConfig:
    """Generation parameters; identical (config, seed) yields identical bytes."""

    image_size: int = 128
    num_cases: int = 20
    frames_per_case: int = 8
    tumor_radius_range: tuple[float, float] = (12.0, 20.0)
    noise_sigma: float = 0.05
    malignant_fraction: float = 0.5
    cue_mode: str = "joint_modal"
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 64:
            raise ConfigError(f"image_size must be >= 64, got {self.image_size}")
        if self.num_cases < 1:
            raise ConfigError(f"num_cases must be >= 1, got {self.num_cases}")
        if self.frames_per_case < 8:
            raise ConfigError(f"frames_per_case must be >= 8, got {self.frames_per_case}")
        rmin, rmax = self.tumor_radius_range
        if not (4.0 <= rmin <= rmax):
            raise ConfigError(f"tumor_radius_range must satisfy 4 <= min <= max, got {self.tumor_radius_range}")
        if 2.0 * rmax + 8.0 >= self.image_size:
            raise ConfigError(f"tumor_radius_range too large for image_size {self.image_size}")
        if self.noise_sigma < 0.0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 0.0 <= self.malignant_fraction <= 1.0:
            raise ConfigError(f"malignant_fraction must be in [0, 1], got {self.malignant_fraction}")
        if self.cue_mode not in CUE_MODES:
            raise ConfigError(f"cue_mode must be one of {CUE_MODES}, got {self.cue_mode!r}")


def label_from_bits(shape_bit: int, texture_bit: int) -> int:
    """Joint-cue rule: class index is the XOR of the two modality bits."""
    return (shape_bit ^ texture_bit) & 1


def enhancement_curve(label: str, num_frames: int, plateau: float | None = None) -> np.ndarray:
    """Closed-form enhancement level template for one class.

    Benign: a slow narrow ramp of span BENIGN_RAMP_SPAN around ``plateau``
    (defaults to the middle of the level range). Malignant: a fast wash-in /
    wash-out tent visiting the full level range - it rises through every other
    level to the peak, then falls back through the remaining levels.
    """
    if label not in CLASS_NAMES:
        raise ValueError(f"unknown label {label!r}")
    t = np.arange(num_frames, dtype=np.float64)
    if label == "benign":
        if plateau is None:
            plateau = 0.5 * (LEVEL_LO + LEVEL_HI)
        ramp = BENIGN_RAMP_SPAN * (t / (num_frames - 1) - 0.5)
        return plateau + ramp
    levels = LEVEL_LO + (LEVEL_HI - LEVEL_LO) * t / (num_frames - 1)
    # Wash-in through every other level to the peak, wash-out through the rest.
    order = list(range(0, num_frames, 2)) + list(range(num_frames - 1 - num_frames % 2, 0, -2))
    return levels[np.array(order)]


def benign_plateau_range() -> tuple[float, float]:
    """Admissible plateau interval keeping the benign ramp inside the level range."""
    half = 0.5 * BENIGN_RAMP_SPAN
    return (LEVEL_LO + half, LEVEL_HI - half)


def _case_rng(config: SyntheticConfig, case_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(case_index,)))


def _quantize(img: np.ndarray) -> np.ndarray:
    # Snap to the 8-bit grid so PNG round trips are lossless.
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def _disc_mask(size: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    return (xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2 <= r * r


def _square_mask(size: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    return (np.abs(xx + 0.5 - cx) <= r) & (np.abs(yy + 0.5 - cy) <= r)


def _annulus_mask(size: int, cx: float, cy: float, r: float) -> np.ndarray:
    return _disc_mask(size, cx, cy, r) & ~_disc_mask(size, cx, cy, HOLE_RADIUS_FRACTION * r)


def _background(size: int, base: float, rng: np.random.Generator) -> np.ndarray:
    # Mild random linear shading so backgrounds are not perfectly flat.
    yy, xx = np.mgrid[0:size, 0:size]
    gx, gy = rng.uniform(-0.04, 0.04, size=2)
    return base + gx * (xx / size - 0.5) + gy * (yy / size - 0.5)


def generate_case(config: SyntheticConfig, case_index: int) -> CaseRecord:
    """Generate one deterministic case; pure in (config, case_index)."""
    if case_index >= config.num_cases or case_index < 0:
        raise ValueError(f"case_index {case_index} out of range for num_cases {config.num_cases}")
    rng = _case_rng(config, case_index)
    size = config.image_size

    label_idx = int(rng.random() < config.malignant_fraction)
    label = CLASS_NAMES[label_idx]
    u_center = rng.random()
    if u_center < CENTER_A_FRACTION:
        center_id = "A"
    else:
        center_id = "B" if u_center < CENTER_A_FRACTION + 0.5 * (1 - CENTER_A_FRACTION) else "C"

    radius = rng.uniform(*config.tumor_radius_range)
    margin = radius + 3.0
    cx = rng.uniform(margin, size - margin)
    cy = rng.uniform(margin, size - margin)

    shape_bit = int(rng.integers(0, 2))
    texture_bit = shape_bit ^ label_idx
    use_joint = config.cue_mode in ("joint_modal", "both")
    use_temporal = config.cue_mode in ("temporal", "both")

    if use_temporal:
        lo, hi = benign_plateau_range()
        plateau = rng.uniform(lo, hi)
        levels = enhancement_curve(label, config.frames_per_case, plateau=plateau)
    else:
        levels = np.full(config.frames_per_case, JOINT_ENHANCEMENT)

    bg_a = _background(size, BACKGROUND_A, rng)
    bg_b = _background(size, BACKGROUND_B, rng)

    frames: list[GeneratedFrame] = []
    for i in range(config.frames_per_case):
        if i > 0:
            cx = float(np.clip(cx + rng.uniform(-MAX_CENTER_STEP, MAX_CENTER_STEP), margin, size - margin))
            cy = float(np.clip(cy + rng.uniform(-MAX_CENTER_STEP, MAX_CENTER_STEP), margin, size - margin))

        # Modality A: static anatomy. Shape bit selects solid vs hollow disc
        # (the hole shows background right at the center, so cells assigned
        # near the lesion center can read the bit locally); pure temporal
        # mode gives both classes the identical square silhouette.
        if use_joint:
            mask_a = _disc_mask(size, cx, cy, radius) if shape_bit == 0 else _annulus_mask(size, cx, cy, radius)
        else:
            mask_a = _square_mask(size, cx, cy, radius)
        image_a = bg_a.copy()
        image_a[mask_a] = TUMOR_A

        # Modality B: perfusion-like channel at the frame's enhancement level.
        # Texture bit selects solid vs ring fill; temporal mode uses a filled
        # square so the box mean traces the enhancement curve exactly.
        image_b = bg_b.copy()
        level = float(levels[i])
        if use_joint:
            outer = _disc_mask(size, cx, cy, radius)
            if texture_bit == 0:
                image_b[outer] = level
            else:
                core = _disc_mask(size, cx, cy, HOLE_RADIUS_FRACTION * radius)
                image_b[outer & ~core] = level
                image_b[core] = RING_CORE_B
        else:
            image_b[_square_mask(size, cx, cy, radius)] = level

        image_a = image_a + rng.normal(0.0, config.noise_sigma, (size, size))
        image_b = image_b + rng.normal(0.0, config.noise_sigma, (size, size))

        if center_id == "A":
            image_a = np.clip(image_a, 0.0, 1.0) ** CENTER_A_GAMMA
            image_b = np.clip(image_b, 0.0, 1.0) ** CENTER_A_GAMMA

        box = BBox(cx - radius, cy - radius, cx + radius, cy + radius)
        frames.append(
            PairedFrame(
                image_a=_quantize(image_a),
                image_b=_quantize(image_b),
                box=box,
                cls=label_idx,
                frame_index=i,
            )
        )

    return CaseRecord(
        case_id=f"case_{case_index:04d}",
        label=label,
        frames=frames,
        center_id=center_id,
        shape_bit=shape_bit,
        texture_bit=texture_bit,
    )


def generate_dataset(config: SyntheticConfig) -> list[CaseRecord]:
    """All cases of the config, in index order."""
    return [generate_case(config, i) for i in range(config.num_cases)]


@dataclass
class DatasetManifest:
    """On-disk dataset summary: cases, split assignment, per-file checksums."""

    schema_version: int
    config: dict
    cases: list[dict]
    splits: dict[str, list[str]]
    checksums: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "DatasetManifest":
        raw = json.loads(text)
        return DatasetManifest(
            schema_version=raw["schema_version"],
            config=raw["config"],
            cases=raw["cases"],
            splits=raw["splits"],
            checksums=raw["checksums"],
        )


def _largest_remainder(fractions: tuple[float, ...], n: int) -> list[int]:
    raw = [f * n for f in fractions]
    counts = [int(np.floor(v)) for v in raw]
    order = sorted(range(len(fractions)), key=lambda i: (raw[i] - counts[i], -i), reverse=True)
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def _stratified_splits(
    cases: list[CaseRecord], fractions: tuple[float, float, float], seed: int
) -> dict[str, list[str]]:
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    strata: dict[tuple[str, str], list[str]] = {}
    for case in cases:
        strata.setdefault((case.label, case.center_id), []).append(case.case_id)

    # Global split sizes are exact (largest remainder over the total); strata
    # take their floor share first and the leftovers are handed out within the
    # remaining global capacity, by per-stratum fractional remainder.
    names = ("train", "val", "test")
    target = dict(zip(names, _largest_remainder(fractions, len(cases))))
    assigned = {name: 0 for name in names}
    splits: dict[str, list[str]] = {name: [] for name in names}
    for key in sorted(strata):
        ids = sorted(strata[key])
        rng.shuffle(ids)
        n = len(ids)
        raw = [f * n for f in fractions]
        counts = [int(np.floor(v)) for v in raw]
        preference = sorted(range(3), key=lambda i: (raw[i] - counts[i], -i), reverse=True)
        for _ in range(n - sum(counts)):
            for i in preference:
                if assigned[names[i]] + counts[i] < target[names[i]]:
                    counts[i] += 1
                    break
        offsets = np.cumsum([0] + counts)
        for name, lo, hi in zip(names, offsets[:-1], offsets[1:]):
            splits[name].extend(ids[lo:hi])
            assigned[name] += hi - lo
    for name in splits:
        splits[name].sort()
    return splits


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_dataset(
    cases: list[CaseRecord],
    root: str | Path,
    config: SyntheticConfig | None = None,
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2),
    split_seed: int = 0,
) -> DatasetManifest:
    """Write the on-disk layout and return its manifest.

    Layout: ``root/manifest.json`` plus per case ``root/<case_id>/frame_<i>_A.png``,
    ``frame_<i>_B.png`` and ``frame_<i>.json`` (corner box in pixels, label string).
    """
    if not cases:
        raise ValueError("no cases")
    ids = [c.case_id for c in cases]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise ValueError(f"duplicate case_id: {dupes}")

    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset root {root}: {exc}") from exc

    checksums: dict[str, str] = {}
    case_rows = []
    for case in cases:
        case_dir = root / case.case_id
        case_dir.mkdir(exist_ok=True)
        for frame in case.frames:
            for suffix, img in (("A", frame.image_a), ("B", frame.image_b)):
                path = case_dir / f"frame_{frame.frame_index}_{suffix}.png"
                arr = np.round(img * 255.0).astype(np.uint8)
                Image.fromarray(arr, mode="L").save(path)
                checksums[str(path.relative_to(root))] = _sha256(path)
            meta_path = case_dir / f"frame_{frame.frame_index}.json"
            meta_path.write_text(
                json.dumps(
                    {"box": list(frame.box.as_array()), "label": CLASS_NAMES[frame.cls]},
                    sort_keys=True,
                )
            )
            checksums[str(meta_path.relative_to(root))] = _sha256(meta_path)
        case_rows.append(
            {
                "case_id": case.case_id,
                "label": case.label,
                "center_id": case.center_id,
                "num_frames": len(case.frames),
            }
        )

    manifest = DatasetManifest(
        schema_version=SCHEMA_VERSION,
        config=asdict(config) if config is not None else {},
        cases=case_rows,
        splits=_stratified_splits(cases, split_fractions, split_seed),
        checksums=checksums,
    )
    (root / "manifest.json").write_text(manifest.to_json())
    return manifest
