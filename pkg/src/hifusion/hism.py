"""Hierarchical intra-spot modeling.

A spot image is decomposed into g x g non-overlapping patches for every
level g (g=1 is the whole spot), all patches of a level are encoded by the
shared spot encoder in one batch, the per-patch maps are reassembled in
their original positions, and every level is bilinearly resized to the
level-1 grid.  The alignment loss penalizes the L1 distance of each finer
level to the level-1 map, enforcing cross-scale consistency.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .config import ALIGN_REDUCTIONS


@dataclass
class HismOutput:
    per_level_maps: dict[int, torch.Tensor]  # g -> (B, d, h, w), all same shape
    align_loss: torch.Tensor  # scalar


def decompose(images: torch.Tensor, g: int) -> torch.Tensor:
    """(B, 3, S, S) -> (B, g*g, 3, S/g, S/g), patches ordered row-major."""
    if images.ndim != 4:
        raise ValueError(f"expected (B, C, S, S), got shape {tuple(images.shape)}")
    b, c, height, width = images.shape
    if height != width:
        raise ValueError(f"expected square images, got {height}x{width}")
    if g < 1 or height % g:
        raise ValueError(f"level {g} does not divide image size {height}")
    s = height // g
    patches = images.reshape(b, c, g, s, g, s)
    patches = patches.permute(0, 2, 4, 1, 3, 5)  # (B, grid_row, grid_col, C, s, s)
    return patches.reshape(b, g * g, c, s, s)


def reassemble(patch_maps: torch.Tensor, g: int) -> torch.Tensor:
    """(B, g*g, d, h, w) row-major -> (B, d, g*h, g*w); inverse of decompose."""
    if patch_maps.ndim != 5:
        raise ValueError(f"expected (B, g*g, d, h, w), got shape {tuple(patch_maps.shape)}")
    b, n, d, h, w = patch_maps.shape
    if n != g * g:
        raise ValueError(f"expected {g * g} patches for level {g}, got {n}")
    grid = patch_maps.reshape(b, g, g, d, h, w)
    grid = grid.permute(0, 3, 1, 4, 2, 5)  # (B, d, grid_row, h, grid_col, w)
    return grid.reshape(b, d, g * h, g * w)


def resize_to(feature_map: torch.Tensor, target_h: int, target_w: int) -> torch.Tensor:
    """Bilinear resize with half-pixel sampling; identity when already sized."""
    if target_h < 1 or target_w < 1:
        raise ValueError(f"target size must be positive, got {target_h}x{target_w}")
    if feature_map.shape[-2:] == (target_h, target_w):
        return feature_map
    return F.interpolate(feature_map, size=(target_h, target_w), mode="bilinear", align_corners=False)


def alignment_loss(per_level_maps: dict[int, torch.Tensor], reduction: str = "mean") -> torch.Tensor:
    """Sum over levels g > 1 of the L1 distance to the level-1 map.

    reduction picks the per-spot element aggregation (sum or mean over
    d*h*w); either way the result is averaged over the batch dimension.
    """
    if reduction not in ALIGN_REDUCTIONS:
        raise ValueError(f"reduction must be one of {ALIGN_REDUCTIONS}, got {reduction!r}")
    if 1 not in per_level_maps:
        raise ValueError("alignment loss requires the level-1 map")
    base = per_level_maps[1]
    for g, fmap in per_level_maps.items():
        if fmap.shape != base.shape:
            raise ValueError(
                f"level {g} map shape {tuple(fmap.shape)} != level-1 shape {tuple(base.shape)}"
            )
    total = base.new_zeros(())
    for g, fmap in per_level_maps.items():
        if g == 1:
            continue
        per_spot = (fmap - base).abs().flatten(1)
        per_spot = per_spot.sum(dim=1) if reduction == "sum" else per_spot.mean(dim=1)
        total = total + per_spot.mean()
    return total


def hism_forward(
    spot_images: torch.Tensor,
    encoder,
    levels: list[int],
    align_reduction: str = "mean",
) -> HismOutput:
    """Encode every level with the shared encoder and align to the level-1 grid."""
    if levels[0] != 1:
        raise ValueError("levels must start with 1")
    b = spot_images.shape[0]
    maps: dict[int, torch.Tensor] = {}
    target_h = target_w = None
    for g in levels:
        patches = decompose(spot_images, g)
        n, c, s, _ = patches.shape[1], patches.shape[2], patches.shape[3], patches.shape[4]
        feats = encoder(patches.reshape(b * n, c, s, s))
        _, d, h, w = feats.shape
        level_map = reassemble(feats.reshape(b, n, d, h, w), g)
        if g == 1:
            target_h, target_w = level_map.shape[-2:]
        maps[g] = resize_to(level_map, target_h, target_w)
    return HismOutput(per_level_maps=maps, align_loss=alignment_loss(maps, align_reduction))
