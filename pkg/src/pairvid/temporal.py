"""Object-level temporal aggregation over selected per-frame features.

All valid selected slots of a clip act as tokens. Two attention matrices are
computed from the cls features and the reg features respectively, each
row-stochastic over valid keys, and their SUM (row mass 2, kept unnormalized
on purpose) weights the cls values; a residual add of the cls features gives
the aggregated tokens. A masked mean pool and an MLP head produce the
two-class clip diagnosis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from pairvid.selection import SelectedFeatureSet, SlotProvenance

MLP_HIDDEN = 128
NEG_INF = float("-inf")


@dataclass
class ClipDiagnosis:
    """Clip-level class probabilities with slot provenance."""

    probs: tuple[float, float]
    predicted: int
    contributing: list[SlotProvenance]


class TemporalAggregator(nn.Module):
    """Dual-source time attention plus MLP classification head."""

    def __init__(self, d_head: int = 64, hidden: int = MLP_HIDDEN, num_classes: int = 2):
        super().__init__()
        self.d_head = d_head
        self.scale = 1.0 / math.sqrt(d_head)
        self.q_cls = nn.Linear(d_head, d_head, bias=False)
        self.k_cls = nn.Linear(d_head, d_head, bias=False)
        self.v_cls = nn.Linear(d_head, d_head, bias=False)
        self.q_reg = nn.Linear(d_head, d_head, bias=False)
        self.k_reg = nn.Linear(d_head, d_head, bias=False)
        self.mlp = nn.Sequential(
            nn.Linear(d_head, hidden), nn.GELU(), nn.Linear(hidden, num_classes)
        )

    def attention_matrices(
        self, f_cls: torch.Tensor, f_reg: torch.Tensor, mask: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """The two row-stochastic (B, T, T) matrices; masked keys get -inf logits."""
        key_bias = torch.where(mask, 0.0, NEG_INF).to(f_cls.dtype)[:, None, :]
        logits_cls = self.q_cls(f_cls) @ self.k_cls(f_cls).transpose(-2, -1) * self.scale
        logits_reg = self.q_reg(f_reg) @ self.k_reg(f_reg).transpose(-2, -1) * self.scale
        attn_cls = torch.softmax(logits_cls + key_bias, dim=-1)
        attn_reg = torch.softmax(logits_reg + key_bias, dim=-1)
        # Rows of fully-masked queries are NaN-free zeros after this.
        query_valid = mask[:, :, None].to(f_cls.dtype)
        return attn_cls * query_valid, attn_reg * query_valid

    def aggregate(
        self, f_cls: torch.Tensor, f_reg: torch.Tensor, mask: torch.Tensor
    ) -> torch.Tensor:
        """(B, T, d) aggregated tokens: summed dual attention on V_cls plus
        residual cls features. Invalid tokens come out zero."""
        attn_cls, attn_reg = self.attention_matrices(f_cls, f_reg, mask)
        attended = (attn_cls + attn_reg) @ self.v_cls(f_cls)
        return (attended + f_cls) * mask[:, :, None].to(f_cls.dtype)

    def pool_and_classify(self, f_temp: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Masked mean pool over valid tokens, then the MLP head. Returns logits."""
        counts = mask.sum(dim=1, keepdim=True).clamp(min=1).to(f_temp.dtype)
        pooled = (f_temp * mask[:, :, None].to(f_temp.dtype)).sum(dim=1) / counts
        return self.mlp(pooled)

    def forward(
        self, f_cls: torch.Tensor, f_reg: torch.Tensor, mask: torch.Tensor
    ) -> torch.Tensor:
        """Batched clip logits from (B, T, d) features and a (B, T) validity mask."""
        if not mask.any(dim=1).all():
            raise ValueError("empty clip evidence: a clip has zero valid slots")
        return self.pool_and_classify(self.aggregate(f_cls, f_reg, mask), mask)


def _flatten_tokens(sel: SelectedFeatureSet) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    l, k, d = sel.f_cls.shape
    return (
        sel.f_cls.reshape(1, l * k, d),
        sel.f_reg.reshape(1, l * k, d),
        sel.mask.reshape(1, l * k),
    )


def time_attention(sel: SelectedFeatureSet, model: TemporalAggregator) -> torch.Tensor:
    """Aggregated tokens for the clip's valid slots, in slot order: (n, d)."""
    if sel.num_valid == 0:
        raise ValueError("empty clip evidence: no valid selected slots")
    f_cls, f_reg, mask = _flatten_tokens(sel)
    f_temp = model.aggregate(f_cls, f_reg, mask)
    return f_temp[0][mask[0]]


def classify_clip(sel: SelectedFeatureSet, model: TemporalAggregator) -> ClipDiagnosis:
    """Full aggregation head on one clip's selected features."""
    if sel.num_valid == 0:
        raise ValueError("empty clip evidence: no valid selected slots")
    f_cls, f_reg, mask = _flatten_tokens(sel)
    with torch.no_grad():
        logits = model(f_cls, f_reg, mask)
    probs = torch.softmax(logits[0], dim=-1)
    contributing = [p for frame in sel.provenance for p in frame]
    return ClipDiagnosis(
        probs=(float(probs[0]), float(probs[1])),
        predicted=int(torch.argmax(probs)),
        contributing=contributing,
    )


def ota_loss(probs, label: int) -> torch.Tensor:
    """Cross-entropy of clip probabilities against the clip label."""
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label}")
    if not torch.is_tensor(probs):
        probs = torch.tensor(probs, dtype=torch.float64)
    return -torch.log(probs[label].clamp(min=1e-30))
