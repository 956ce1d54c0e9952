"""Spatial expression maps: per-gene scatter panels at spot centers.

Layout: one row per gene, one column per source (measured, predicted),
with a shared color scale inside each row so brightness is comparable
between the two panels. Brighter means higher expression.
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .dataset import SlideRecord
from .evaluation import metric_pcc

CMAP = "magma"


def panel_annotation(values: np.ndarray, truth: np.ndarray) -> str:
    """MAE and Pearson r of one panel against the measured column."""
    values = np.asarray(values, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    mae = float(np.abs(values - truth).mean())
    if len(values) < 2:
        return f"MAE {mae:.3f}  PCC n/a"
    _, per, excluded = metric_pcc(values[:, None], truth[:, None])
    if excluded:
        # a constant panel has no defined correlation
        return f"MAE {mae:.3f}  PCC n/a"
    return f"MAE {mae:.3f}  PCC {per[0]:.2f}"


def render_expression_figure(
    slide: SlideRecord,
    truth: np.ndarray,
    pred: np.ndarray,
    gene_names: list[str],
    genes: list[str],
    show_image: bool = True,
):
    """Build the figure; the caller owns saving and closing it."""
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    n = len(slide.spots)
    if truth.shape != (n, len(gene_names)) or pred.shape != truth.shape:
        raise ValueError(
            f"expected {n} x {len(gene_names)} value arrays, got {truth.shape} and {pred.shape}"
        )
    if not genes:
        raise ValueError("no genes requested")
    missing = [g for g in genes if g not in gene_names]
    if missing:
        raise ValueError(f"gene(s) not in the prediction set: {', '.join(missing)}")

    col = {g: j for j, g in enumerate(gene_names)}
    xs = np.array([s.center_x_px for s in slide.spots], dtype=np.float64)
    ys = np.array([s.center_y_px for s in slide.spots], dtype=np.float64)

    rows = len(genes)
    fig, axes = plt.subplots(
        rows, 2, figsize=(7.0, 3.2 * rows), squeeze=False, constrained_layout=True
    )
    for i, gene in enumerate(genes):
        j = col[gene]
        columns = ((f"{gene} measured", truth[:, j]), (f"{gene} predicted", pred[:, j]))
        vmin = min(float(truth[:, j].min()), float(pred[:, j].min()))
        vmax = max(float(truth[:, j].max()), float(pred[:, j].max()))
        if math.isclose(vmin, vmax):
            vmax = vmin + 1e-9
        scatter = None
        for k, (title, values) in enumerate(columns):
            ax = axes[i][k]
            if show_image and slide.image is not None:
                ax.imshow(slide.image, alpha=0.4)
            scatter = ax.scatter(xs, ys, c=values, cmap=CMAP, vmin=vmin, vmax=vmax, s=36)
            ax.set_title(title, fontsize=10)
            ax.set_xlabel(panel_annotation(values, truth[:, j]), fontsize=9)
            ax.set_xticks([])
            ax.set_yticks([])
            ax.set_aspect("equal")
            if not (show_image and slide.image is not None):
                ax.invert_yaxis()  # image row 0 is the top
        fig.colorbar(scatter, ax=[axes[i][0], axes[i][1]], shrink=0.85)
    return fig


def plot_spatial_expression(
    slide: SlideRecord,
    truth: np.ndarray,
    pred: np.ndarray,
    gene_names: list[str],
    genes: list[str],
    out_path,
    dpi: int = 100,
    show_image: bool = True,
) -> Path:
    fig = render_expression_figure(slide, truth, pred, gene_names, genes, show_image=show_image)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=dpi, format="png")
    plt.close(fig)
    return out
