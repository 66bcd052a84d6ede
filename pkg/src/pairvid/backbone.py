"""Weight-sharing dual-branch hierarchical encoder.

A patch embedding followed by three stages of windowed self-attention blocks
with patch merging in between, producing a 3-level feature pyramid at strides
8/16/32. Both modalities run through the identical parameter set (one module,
two forward passes). Layer normalization throughout, so train/eval statistics
never diverge and frozen-stage inference is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

PYRAMID_STRIDES = (8, 16, 32)


@dataclass(frozen=True)
class BackboneConfig:
    patch_size: int = 4
    stage_dims: tuple[int, int, int] = (32, 64, 128)
    blocks_per_stage: tuple[int, int, int] = (1, 1, 2)
    attention_window: int = 4
    in_channels: int = 1

    def __post_init__(self):
        if self.patch_size < 1 or self.attention_window < 1 or self.in_channels < 1:
            raise ValueError("backbone config fields must be positive")
        if any(d < 1 for d in self.stage_dims) or any(b < 1 for b in self.blocks_per_stage):
            raise ValueError("stage dims and block counts must be positive")
        if list(self.stage_dims) != sorted(self.stage_dims):
            raise ValueError(f"stage_dims must be non-decreasing, got {self.stage_dims}")


@dataclass
class FeaturePyramid:
    """Three feature maps at strides 8/16/32, each (B, C_i, H_i, W_i) with
    H_i = ceil(input_h / stride_i)."""

    levels: list[torch.Tensor]
    strides: tuple[int, int, int] = PYRAMID_STRIDES
    input_hw: tuple[int, int] = (0, 0)


def _window_partition(x: torch.Tensor, win: int) -> tuple[torch.Tensor, int, int]:
    """(B, H, W, C) -> (B*nW, win*win, C), padding H/W up to window multiples."""
    b, h, w, c = x.shape
    pad_h = (win - h % win) % win
    pad_w = (win - w % win) % win
    if pad_h or pad_w:
        x = F.pad(x, (0, 0, 0, pad_w, 0, pad_h))
    hp, wp = h + pad_h, w + pad_w
    x = x.view(b, hp // win, win, wp // win, win, c)
    x = x.permute(0, 1, 3, 2, 4, 5).reshape(-1, win * win, c)
    return x, hp, wp


def _window_reverse(windows: torch.Tensor, win: int, hp: int, wp: int, h: int, w: int) -> torch.Tensor:
    b = windows.shape[0] // ((hp // win) * (wp // win))
    x = windows.view(b, hp // win, wp // win, win, win, -1)
    x = x.permute(0, 1, 3, 2, 4, 5).reshape(b, hp, wp, -1)
    return x[:, :h, :w]


class WindowAttention(nn.Module):
    """Single-head scaled dot-product self-attention inside square windows."""

    def __init__(self, dim: int, window: int):
        super().__init__()
        self.window = window
        self.scale = 1.0 / math.sqrt(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, h, w, c = x.shape
        tokens, hp, wp = _window_partition(x, self.window)
        q, k, v = self.qkv(tokens).chunk(3, dim=-1)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        out = self.proj(attn @ v)
        return _window_reverse(out, self.window, hp, wp, h, w)


class EncoderBlock(nn.Module):
    def __init__(self, dim: int, window: int, mlp_ratio: float = 2.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, window)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class PatchMerge(nn.Module):
    """2x2 neighborhood concat + linear projection; halves resolution."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * in_dim)
        self.reduce = nn.Linear(4 * in_dim, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, h, w, c = x.shape
        if h % 2 or w % 2:
            x = F.pad(x, (0, 0, 0, w % 2, 0, h % 2))
            b, h, w, c = x.shape[0], x.shape[1], x.shape[2], x.shape[3]
        x = torch.cat(
            [x[:, 0::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 0::2], x[:, 1::2, 1::2]], dim=-1
        )
        return self.reduce(self.norm(x))


class DualBranchBackbone(nn.Module):
    """Hierarchical windowed-attention encoder producing one pyramid per call.

    ``extract_pair`` runs both modalities through the very same parameters.
    """

    def __init__(self, config: BackboneConfig | None = None):
        super().__init__()
        self.config = config or BackboneConfig()
        cfg = self.config
        embed_dim = max(cfg.stage_dims[0] // 2, 8)
        self.patch_embed = nn.Conv2d(cfg.in_channels, embed_dim, cfg.patch_size, stride=cfg.patch_size)
        self.embed_norm = nn.LayerNorm(embed_dim)
        dims = (embed_dim, *cfg.stage_dims)
        self.merges = nn.ModuleList(
            PatchMerge(dims[i], dims[i + 1]) for i in range(3)
        )
        self.stages = nn.ModuleList(
            nn.Sequential(
                *[EncoderBlock(cfg.stage_dims[i], cfg.attention_window) for _ in range(cfg.blocks_per_stage[i])]
            )
            for i in range(3)
        )

    @property
    def out_dims(self) -> tuple[int, int, int]:
        return self.config.stage_dims

    def forward(self, image: torch.Tensor) -> FeaturePyramid:
        """(B, C, H, W) -> pyramid; inputs padded to a stride-32 multiple
        internally and every level cropped back to ceil(input/stride)."""
        if image.ndim != 4:
            raise ValueError(f"expected (B, C, H, W) input, got shape {tuple(image.shape)}")
        b, c, h, w = image.shape
        pad_h = (32 - h % 32) % 32
        pad_w = (32 - w % 32) % 32
        if pad_h or pad_w:
            image = F.pad(image, (0, pad_w, 0, pad_h))

        x = self.patch_embed(image).permute(0, 2, 3, 1)
        x = self.embed_norm(x)
        levels = []
        for merge, stage, stride in zip(self.merges, self.stages, PYRAMID_STRIDES):
            x = stage(merge(x))
            lh = math.ceil(h / stride)
            lw = math.ceil(w / stride)
            levels.append(x[:, :lh, :lw].permute(0, 3, 1, 2))
        return FeaturePyramid(levels=levels, input_hw=(h, w))

    def extract_pair(self, image_a: torch.Tensor, image_b: torch.Tensor) -> tuple[FeaturePyramid, FeaturePyramid]:
        if image_a.shape != image_b.shape:
            raise ValueError(
                f"modality shapes differ: {tuple(image_a.shape)} vs {tuple(image_b.shape)}"
            )
        return self.forward(image_a), self.forward(image_b)
