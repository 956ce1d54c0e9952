"""Context-aware cross-scale fusion.

The region branch pools a lightweight encoding of the neighbor image into a
query vector.  The multi-level spot maps are fused by a learnable softmax
over per-level logits, average-pooled into k*k tokens that serve as both
keys and values, and combined with the query through residual multi-head
cross-attention.  A LayerNorm + linear head maps the result to the gene
expression vector.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


class FusionWeights(nn.Module):
    """Per-level logits alpha; fusion uses omega = softmax(alpha)."""

    def __init__(self, n_levels: int):
        super().__init__()
        if n_levels < 1:
            raise ValueError("need at least one level")
        self.alphas = nn.Parameter(torch.zeros(n_levels))

    @property
    def omegas(self) -> torch.Tensor:
        return torch.softmax(self.alphas, dim=0)


def fuse_levels(per_level_maps: dict[int, torch.Tensor], weights: FusionWeights) -> torch.Tensor:
    """Convex combination sum_s omega_s * F_s, levels in ascending order."""
    if len(per_level_maps) != weights.alphas.numel():
        raise ValueError(
            f"{weights.alphas.numel()} fusion weights for {len(per_level_maps)} maps"
        )
    levels = sorted(per_level_maps)
    stacked = torch.stack([per_level_maps[g] for g in levels], dim=0)
    omegas = weights.omegas.to(stacked.dtype).view(-1, 1, 1, 1, 1)
    return (omegas * stacked).sum(dim=0)


def tokens_from_fused(fused: torch.Tensor, k: int) -> torch.Tensor:
    """(B, d, h, w) -> (B, k*k, d): adaptive average pool to (k, k), row-major."""
    if fused.ndim != 4:
        raise ValueError(f"expected (B, d, h, w), got shape {tuple(fused.shape)}")
    h, w = fused.shape[-2:]
    if k < 1 or k > h or k > w:
        raise ValueError(f"k must be in [1, min(h, w)] = [1, {min(h, w)}], got {k}")
    pooled = F.adaptive_avg_pool2d(fused, (k, k))
    return pooled.flatten(2).transpose(1, 2)


def region_query(region_images: torch.Tensor, region_encoder: nn.Module) -> torch.Tensor:
    """Global average pool of the region feature map: (B, 3, H, W) -> (B, d)."""
    return region_encoder(region_images).mean(dim=(2, 3))


class CrossAttention(nn.Module):
    """Multi-head cross-attention for a single query against t tokens.

    Bias-free d x d projections for Q/K/V plus an output projection after
    head concatenation.
    """

    def __init__(self, d: int, heads: int):
        super().__init__()
        if heads < 1 or d % heads:
            raise ValueError(f"heads must divide d, got d={d} heads={heads}")
        self.d = d
        self.heads = heads
        self.d_k = d // heads
        self.w_q = nn.Linear(d, d, bias=False)
        self.w_k = nn.Linear(d, d, bias=False)
        self.w_v = nn.Linear(d, d, bias=False)
        self.w_o = nn.Linear(d, d, bias=False)

    def forward(
        self,
        query: torch.Tensor,
        keys: torch.Tensor,
        values: torch.Tensor,
        return_weights: bool = False,
    ):
        if query.ndim != 2 or keys.ndim != 3 or values.ndim != 3:
            raise ValueError("expected query (B, d), keys/values (B, t, d)")
        if keys.shape != values.shape or query.shape[0] != keys.shape[0]:
            raise ValueError("query/keys/values batch or token shapes disagree")
        b, t, _ = keys.shape
        q = self.w_q(query).view(b, self.heads, self.d_k)
        k = self.w_k(keys).view(b, t, self.heads, self.d_k)
        v = self.w_v(values).view(b, t, self.heads, self.d_k)
        scores = torch.einsum("bhc,bthc->bht", q, k) / math.sqrt(self.d_k)
        attn = torch.softmax(scores, dim=-1)
        mixed = torch.einsum("bht,bthc->bhc", attn, v).reshape(b, self.d)
        out = self.w_o(mixed)
        if return_weights:
            return out, attn
        return out


class PredictionHead(nn.Module):
    """LayerNorm over d followed by a linear map to the gene count."""

    def __init__(self, d: int, n_genes: int, eps: float = 1e-5):
        super().__init__()
        self.norm = nn.LayerNorm(d, eps=eps)
        self.fc = nn.Linear(d, n_genes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(self.norm(x))


def predict(
    query: torch.Tensor,
    tokens: torch.Tensor,
    attention: CrossAttention,
    head: PredictionHead,
) -> torch.Tensor:
    """Residual cross-attention followed by the prediction head (K = V = tokens)."""
    attn_out = attention(query, tokens, tokens)
    return head(query + attn_out)
