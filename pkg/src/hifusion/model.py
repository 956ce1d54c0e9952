"""Full spot-expression model: hierarchical spot encoding fused with
regional context through residual cross-attention.

Variant switches (all config-driven, used by the ablation harness):
  fusion = "additive"      replace the attention output with the token mean
  region_branch = False    predict from the pooled fused spot feature alone
  qk_reversed = "ccf"      tokens come from the region map, query from the spot
  qk_reversed = "input"    swap the two images before any encoding
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .ccf import CrossAttention, FusionWeights, PredictionHead, fuse_levels, region_query, tokens_from_fused
from .config import ModelConfig
from .encoders import RegionEncoder, ResidualEncoder
from .hism import HismOutput, hism_forward


@dataclass
class ModelOutput:
    prediction: torch.Tensor  # (B, m)
    aux_predictions: list[torch.Tensor]  # one (B, m) per level, ascending level order
    align_loss: torch.Tensor  # scalar
    attention_weights: torch.Tensor | None  # (B, heads, t) when attention ran


class HiFusion(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.spot_encoder = ResidualEncoder(config.spot_encoder)
        self.region_encoder = (
            RegionEncoder(config.region_encoder, config.d) if config.region_branch else None
        )
        self.fusion = FusionWeights(len(config.levels))
        self.attention = (
            CrossAttention(config.d, config.heads)
            if config.region_branch and config.fusion == "attention"
            else None
        )
        self.head = PredictionHead(config.d, config.n_genes, config.layernorm_eps)
        # one linear shared across levels, separate from the main head
        self.aux_head = nn.Linear(config.d, config.n_genes)

    def forward(self, spot_images: torch.Tensor, region_images: torch.Tensor | None = None) -> ModelOutput:
        cfg = self.config
        if cfg.region_branch and region_images is None:
            raise ValueError("region images required when the region branch is enabled")
        if cfg.qk_reversed == "input":
            spot_images, region_images = region_images, spot_images
        hism_out = hism_forward(spot_images, self.spot_encoder, cfg.levels, cfg.align_reduction)
        return self.ccf_forward(hism_out, region_images)

    def ccf_forward(self, hism_out: HismOutput, region_images: torch.Tensor | None) -> ModelOutput:
        cfg = self.config
        maps = hism_out.per_level_maps
        fused = fuse_levels(maps, self.fusion)
        aux = [self.aux_head(maps[g].mean(dim=(2, 3))) for g in sorted(maps)]

        attn_weights = None
        if not cfg.region_branch:
            pred = self.head(fused.mean(dim=(2, 3)))
        else:
            if cfg.qk_reversed == "ccf":
                tokens = tokens_from_fused(self.region_encoder(region_images), cfg.k)
                query = fused.mean(dim=(2, 3))
            else:
                query = region_query(region_images, self.region_encoder)
                tokens = tokens_from_fused(fused, cfg.k)
            if cfg.fusion == "additive":
                attn_out = tokens.mean(dim=1)
            else:
                attn_out, attn_weights = self.attention(query, tokens, tokens, return_weights=True)
            pred = self.head(query + attn_out)

        return ModelOutput(
            prediction=pred,
            aux_predictions=aux,
            align_loss=hism_out.align_loss,
            attention_weights=attn_weights,
        )
