"""Spot-level gene expression prediction from histology patches.

Dual-branch model: hierarchical multi-resolution encoding of each spot
image plus a region-context branch fused through residual cross-attention,
with training, evaluation protocols, and an ablation harness.
"""

__version__ = "0.1.0"
