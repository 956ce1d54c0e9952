"""Synthetic histology-with-expression generator for desk-scale experiments.

Each spot gets a latent intensity v ~ U(0.1, 0.9).  The slide image renders
v as a stained disk (channel-wise darkening plus texture dots) at the spot
center, and gene j's count is a linear readout of the same latent:

    count_j = max(1, round(base + strength_j * v * scale + noise))

so expression is learnable from morphology alone.  Strengths default to a
decreasing ladder over genes (gene 0 strongest), which makes mean counts
strictly decreasing in gene index; a strength of 0 makes that gene's counts
independent of the image.  `style_shift` applies a per-patient channel
gain/offset to the image only, leaving counts untouched, so cross-patient
appearance varies while within-patient layers stay consistent.
"""

from __future__ import annotations

import math

import numpy as np

from .dataset import ExpressionMatrix, SlideRecord, SpotMeta

BASE_COLOR = (240.0, 225.0, 230.0)
DISK_DARKENING = (0.75, 0.45, 0.85)  # per-channel fraction retained at v=1
DISK_RADIUS = 20
SPOT_SPACING = 64
SLIDE_MARGIN = 64
COUNT_BASE = 30.0
COUNT_SCALE = 25.0
COUNT_NOISE_SD = 1.0
TEXTURE_DOTS = 24


def default_strengths(n_genes: int) -> np.ndarray:
    """Signed ladder, strictly decreasing, magnitudes in [0.4, 1.0].

    The per-spot normalization divides by the total count, so couplings
    that all share one sign would mostly cancel out of the normalized
    targets.  Balancing positive and negative couplings (sum ~ 0) keeps
    the total roughly constant and every gene's normalized value strongly
    tied to the latent.  Strictly decreasing strengths make mean counts
    strictly decreasing in gene index.
    """
    if n_genes == 1:
        return np.array([1.0])
    t = np.arange(n_genes, dtype=np.float64) / (n_genes - 1)
    signed = 1.0 - 2.0 * t
    sign = np.where(signed > 1e-12, 1.0, np.where(signed < -1e-12, -1.0, 1.0))
    return sign * (0.4 + 0.6 * np.abs(signed))


def _render_slide(
    rng: np.random.Generator,
    centers: list[tuple[int, int]],
    latents: np.ndarray,
    shape: tuple[int, int],
    gain: np.ndarray,
    offset: np.ndarray,
) -> np.ndarray:
    h, w = shape
    img = np.empty((h, w, 3), dtype=np.float64)
    img[:] = BASE_COLOR
    img += rng.normal(0.0, 2.0, size=img.shape)

    for (cx, cy), v in zip(centers, latents):
        y0, y1 = max(cy - DISK_RADIUS, 0), min(cy + DISK_RADIUS + 1, h)
        x0, x1 = max(cx - DISK_RADIUS, 0), min(cx + DISK_RADIUS + 1, w)
        yy, xx = np.mgrid[y0:y1, x0:x1]
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= DISK_RADIUS**2
        window = img[y0:y1, x0:x1]
        factors = 1.0 - v * (1.0 - np.asarray(DISK_DARKENING))
        window[mask] *= factors[None, :]
        # Dark nuclei-like dots inside the disk, denser at higher latent.
        n_dots = int(round(TEXTURE_DOTS * v))
        for _ in range(n_dots):
            r = DISK_RADIUS * math.sqrt(rng.uniform())
            theta = rng.uniform(0.0, 2.0 * math.pi)
            dx, dy = int(cx + r * math.cos(theta)), int(cy + r * math.sin(theta))
            y0, y1 = max(dy - 1, 0), min(dy + 2, h)
            x0, x1 = max(dx - 1, 0), min(dx + 2, w)
            img[y0:y1, x0:x1] *= 0.55

    img = img * gain[None, None, :] + offset[None, None, :]
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def synthesize_dataset(
    n_patients: int,
    layers_per_patient: int,
    spots_per_slide: int,
    n_genes: int,
    seed: int,
    *,
    strengths: np.ndarray | None = None,
    style_shift: float = 0.0,
) -> tuple[list[SlideRecord], ExpressionMatrix]:
    """Deterministic synthetic dataset: one slide per (patient, layer).

    Returns slides with in-memory images (image_path left empty until
    written) and the raw count matrix over genes SYNG000..SYNG{n-1}.
    """
    if min(n_patients, layers_per_patient, spots_per_slide, n_genes) < 1:
        raise ValueError("all dataset dimensions must be >= 1")
    if strengths is None:
        strengths = default_strengths(n_genes)
    strengths = np.asarray(strengths, dtype=np.float64)
    if strengths.shape != (n_genes,):
        raise ValueError(f"strengths must have shape ({n_genes},), got {strengths.shape}")

    grid = math.ceil(math.sqrt(spots_per_slide))
    side = 2 * SLIDE_MARGIN + (grid - 1) * SPOT_SPACING
    gene_names = [f"SYNG{j:03d}" for j in range(n_genes)]

    slides: list[SlideRecord] = []
    all_ids: list[str] = []
    all_counts: list[np.ndarray] = []
    for p in range(n_patients):
        style_rng = np.random.default_rng([seed, p, 10_000])
        gain = 1.0 + style_shift * style_rng.uniform(-1.0, 1.0, size=3)
        offset = 40.0 * style_shift * style_rng.uniform(-1.0, 1.0, size=3)
        for layer in range(layers_per_patient):
            rng = np.random.default_rng([seed, p, layer])
            slide_id = f"P{p:02d}_L{layer}"
            centers = []
            for idx in range(spots_per_slide):
                gy, gx = divmod(idx, grid)
                centers.append((SLIDE_MARGIN + gx * SPOT_SPACING, SLIDE_MARGIN + gy * SPOT_SPACING))
            latents = rng.uniform(0.1, 0.9, size=spots_per_slide)

            noise = rng.normal(0.0, COUNT_NOISE_SD, size=(spots_per_slide, n_genes))
            raw = COUNT_BASE + strengths[None, :] * latents[:, None] * COUNT_SCALE + noise
            counts = np.maximum(1, np.round(raw)).astype(np.int64)

            image = _render_slide(rng, centers, latents, (side, side), gain, offset)
            spots = [
                SpotMeta(spot_id=f"{slide_id}_s{idx:04d}", center_x_px=cx, center_y_px=cy)
                for idx, (cx, cy) in enumerate(centers)
            ]
            slides.append(
                SlideRecord(
                    slide_id=slide_id,
                    patient_id=f"P{p:02d}",
                    layer_index=layer,
                    image_path="",
                    spots=spots,
                    image=image,
                )
            )
            all_ids.extend(s.spot_id for s in spots)
            all_counts.append(counts)

    matrix = ExpressionMatrix(
        values=np.concatenate(all_counts, axis=0),
        gene_names=gene_names,
        spot_ids=all_ids,
        space="raw_counts",
    )
    matrix.validate()
    return slides, matrix
