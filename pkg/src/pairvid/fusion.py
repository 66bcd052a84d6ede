"""Attention-based fusion of the two modality pyramids.

The main block runs, per pyramid level and in parallel, cross-attention in
both directions (modality-invariant stream, merged by addition) and
self-attention with a residual on each modality (modality-specific streams).
The three streams are concatenated channel-wise to width 3d and projected
back to d so the detection head stays fusion-agnostic.

Alternative blocks behind the same two-pyramids-in / one-pyramid-out
interface support ablations: plain concatenation, the summed variant of the
dual-attention block, and single-modality passthrough.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from pairvid.backbone import FeaturePyramid


class AttentionProjection(nn.Module):
    """Per-modality q/k/v linear maps of equal square dimension d."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.w_q = nn.Linear(dim, dim, bias=False)
        self.w_k = nn.Linear(dim, dim, bias=False)
        self.w_v = nn.Linear(dim, dim, bias=False)

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.dim)


def _check_tokens(x: torch.Tensor, y: torch.Tensor | None = None) -> None:
    if x.ndim < 2:
        raise ValueError(f"expected (..., N, d) token array, got {tuple(x.shape)}")
    if y is not None and x.shape != y.shape:
        raise ValueError(f"token arrays differ: {tuple(x.shape)} vs {tuple(y.shape)}")


def cross_attention(
    q_src: torch.Tensor,
    kv_src: torch.Tensor,
    proj_q: AttentionProjection,
    proj_kv: AttentionProjection,
    return_weights: bool = False,
):
    """softmax(Q K^T / sqrt(d)) V with Q from q_src, K and V from kv_src."""
    _check_tokens(q_src, kv_src)
    if q_src.shape[-1] != proj_q.dim or kv_src.shape[-1] != proj_kv.dim:
        raise ValueError(
            f"token dim {q_src.shape[-1]} does not match projection dim {proj_q.dim}"
        )
    q = proj_q.w_q(q_src)
    k = proj_kv.w_k(kv_src)
    v = proj_kv.w_v(kv_src)
    weights = torch.softmax(q @ k.transpose(-2, -1) * proj_q.scale, dim=-1)
    out = weights @ v
    return (out, weights) if return_weights else out


def self_attention_residual(
    x: torch.Tensor, proj: AttentionProjection, return_weights: bool = False
):
    """softmax(Q K^T / sqrt(d)) V + x, all projections from x itself."""
    _check_tokens(x)
    out = cross_attention(x, x, proj, proj, return_weights=return_weights)
    if return_weights:
        attended, weights = out
        return attended + x, weights
    return out + x


class DualAttentionFusionLevel(nn.Module):
    """One pyramid level of the parallel cross/self-attention fusion."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.proj_a = AttentionProjection(dim)
        self.proj_b = AttentionProjection(dim)
        self.out_proj = nn.Linear(3 * dim, dim, bias=False)

    def fuse_tokens(self, tokens_a: torch.Tensor, tokens_b: torch.Tensor) -> torch.Tensor:
        """(..., N, d) x2 -> (..., N, d)."""
        _check_tokens(tokens_a, tokens_b)
        invariant = cross_attention(tokens_a, tokens_b, self.proj_a, self.proj_b) + cross_attention(
            tokens_b, tokens_a, self.proj_b, self.proj_a
        )
        spec_a = self_attention_residual(tokens_a, self.proj_a)
        spec_b = self_attention_residual(tokens_b, self.proj_b)
        fused = torch.cat([spec_a, invariant, spec_b], dim=-1)
        return self.out_proj(fused)

    def pre_projection_concat(self, tokens_a: torch.Tensor, tokens_b: torch.Tensor) -> torch.Tensor:
        """The 3d-wide concatenated streams before the output projection."""
        invariant = cross_attention(tokens_a, tokens_b, self.proj_a, self.proj_b) + cross_attention(
            tokens_b, tokens_a, self.proj_b, self.proj_a
        )
        spec_a = self_attention_residual(tokens_a, self.proj_a)
        spec_b = self_attention_residual(tokens_b, self.proj_b)
        return torch.cat([spec_a, invariant, spec_b], dim=-1)


def _map_to_tokens(x: torch.Tensor) -> tuple[torch.Tensor, int, int]:
    b, c, h, w = x.shape
    return x.flatten(2).transpose(1, 2), h, w


def _tokens_to_map(tokens: torch.Tensor, h: int, w: int) -> torch.Tensor:
    b, n, c = tokens.shape
    return tokens.transpose(1, 2).reshape(b, c, h, w)


class FusionBlock(nn.Module):
    """Interface: two modality pyramids in, one fused pyramid out."""

    def forward(self, pyr_a: FeaturePyramid, pyr_b: FeaturePyramid) -> FeaturePyramid:
        raise NotImplementedError

    @staticmethod
    def _check(pyr_a: FeaturePyramid, pyr_b: FeaturePyramid) -> None:
        if len(pyr_a.levels) != len(pyr_b.levels):
            raise ValueError("pyramids have different depths")
        for la, lb in zip(pyr_a.levels, pyr_b.levels):
            if la.shape != lb.shape:
                raise ValueError(f"level shapes differ: {tuple(la.shape)} vs {tuple(lb.shape)}")


class DualAttentionFusion(FusionBlock):
    """Parallel cross/self-attention fusion applied independently per level."""

    def __init__(self, dims: tuple[int, ...]):
        super().__init__()
        self.levels = nn.ModuleList(DualAttentionFusionLevel(d) for d in dims)

    def forward(self, pyr_a: FeaturePyramid, pyr_b: FeaturePyramid) -> FeaturePyramid:
        self._check(pyr_a, pyr_b)
        fused = []
        for level, fa, fb in zip(self.levels, pyr_a.levels, pyr_b.levels):
            ta, h, w = _map_to_tokens(fa)
            tb, _, _ = _map_to_tokens(fb)
            fused.append(_tokens_to_map(level.fuse_tokens(ta, tb), h, w))
        return FeaturePyramid(levels=fused, strides=pyr_a.strides, input_hw=pyr_a.input_hw)


class SumAttentionFusion(FusionBlock):
    """Same attention streams, merged by summation instead of concatenation."""

    def __init__(self, dims: tuple[int, ...]):
        super().__init__()
        self.levels = nn.ModuleList(DualAttentionFusionLevel(d) for d in dims)

    def forward(self, pyr_a: FeaturePyramid, pyr_b: FeaturePyramid) -> FeaturePyramid:
        self._check(pyr_a, pyr_b)
        fused = []
        for level, fa, fb in zip(self.levels, pyr_a.levels, pyr_b.levels):
            ta, h, w = _map_to_tokens(fa)
            tb, _, _ = _map_to_tokens(fb)
            streams = level.pre_projection_concat(ta, tb).chunk(3, dim=-1)
            fused.append(_tokens_to_map(streams[0] + streams[1] + streams[2], h, w))
        return FeaturePyramid(levels=fused, strides=pyr_a.strides, input_hw=pyr_a.input_hw)


class ConcatFusion(FusionBlock):
    """Plain channel concatenation with a linear reduction back to d."""

    def __init__(self, dims: tuple[int, ...]):
        super().__init__()
        self.reduce = nn.ModuleList(nn.Conv2d(2 * d, d, kernel_size=1) for d in dims)

    def forward(self, pyr_a: FeaturePyramid, pyr_b: FeaturePyramid) -> FeaturePyramid:
        self._check(pyr_a, pyr_b)
        fused = [
            reduce(torch.cat([fa, fb], dim=1))
            for reduce, fa, fb in zip(self.reduce, pyr_a.levels, pyr_b.levels)
        ]
        return FeaturePyramid(levels=fused, strides=pyr_a.strides, input_hw=pyr_a.input_hw)


class SingleModalityFusion(FusionBlock):
    """Passes one modality's pyramid through untouched (single-modal baseline)."""

    def __init__(self, which: str):
        super().__init__()
        if which not in ("a", "b"):
            raise ValueError(f"which must be 'a' or 'b', got {which!r}")
        self.which = which

    def forward(self, pyr_a: FeaturePyramid, pyr_b: FeaturePyramid) -> FeaturePyramid:
        self._check(pyr_a, pyr_b)
        return pyr_a if self.which == "a" else pyr_b


FUSION_KINDS = ("dual_attention", "sum_attention", "concat", "single_a", "single_b")


def build_fusion(kind: str, dims: tuple[int, ...]) -> FusionBlock:
    if kind == "dual_attention":
        return DualAttentionFusion(dims)
    if kind == "sum_attention":
        return SumAttentionFusion(dims)
    if kind == "concat":
        return ConcatFusion(dims)
    if kind == "single_a":
        return SingleModalityFusion("a")
    if kind == "single_b":
        return SingleModalityFusion("b")
    raise ValueError(f"unknown fusion kind {kind!r}; expected one of {FUSION_KINDS}")
