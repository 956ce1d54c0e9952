"""Slide/spot/expression ingestion, normalization, gene selection, cropping.

Dataset directory layout (all TSVs UTF-8, tab-separated, LF endings):

    slides.tsv   slide_id  patient_id  layer_index  image_file
    spots.tsv    slide_id  spot_id  center_x_px  center_y_px
    counts.tsv   spot_id  <gene name>...            (one column per gene)
    images/      8-bit RGB PNG or TIFF referenced by slides.tsv

Counts are raw non-negative integers; normalization happens downstream so
the per-spot denominator always covers the full gene set.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError

SLIDES_HEADER = ["slide_id", "patient_id", "layer_index", "image_file"]
SPOTS_HEADER = ["slide_id", "spot_id", "center_x_px", "center_y_px"]


@dataclass
class SpotMeta:
    spot_id: str
    center_x_px: int
    center_y_px: int


@dataclass
class SlideRecord:
    """One tissue section: image plus the spots captured on it."""

    slide_id: str
    patient_id: str
    layer_index: int
    image_path: str
    spots: list[SpotMeta]
    image: np.ndarray | None = None  # H x W x 3 uint8, eagerly loaded


@dataclass
class ExpressionMatrix:
    """n spots x m genes, either raw counts or normalized values."""

    values: np.ndarray
    gene_names: list[str]
    spot_ids: list[str]
    space: str  # "raw_counts" | "normalized"

    def validate(self) -> None:
        n, m = self.values.shape
        if n != len(self.spot_ids) or m != len(self.gene_names):
            raise ValueError("matrix shape does not match id lists")
        if len(set(self.gene_names)) != m:
            raise ValueError("gene names must be unique")
        if len(set(self.spot_ids)) != n:
            raise ValueError("spot ids must be unique")
        if self.space == "raw_counts":
            if np.any(self.values < 0):
                raise ValueError("raw counts must be non-negative")
            if not np.allclose(self.values, np.round(self.values)):
                raise ValueError("raw counts must be integers")

    def row_index(self) -> dict[str, int]:
        return {sid: i for i, sid in enumerate(self.spot_ids)}

    def subset_genes(self, genes: list[str]) -> "ExpressionMatrix":
        col = {g: j for j, g in enumerate(self.gene_names)}
        missing = [g for g in genes if g not in col]
        if missing:
            raise ValueError(f"genes not in matrix: {missing}")
        idx = [col[g] for g in genes]
        return ExpressionMatrix(self.values[:, idx], list(genes), list(self.spot_ids), self.space)


@dataclass
class SpotSample:
    """One training example: spot crop, neighbor crop, target vector."""

    spot_image: np.ndarray  # S x S x 3 float32 in [0, 1]
    neighbor_image: np.ndarray  # N x N x 3 float32 in [0, 1]
    target: np.ndarray  # m-vector
    spot_id: str
    slide_id: str
    patient_id: str


def normalize_expression(counts: np.ndarray) -> np.ndarray:
    """Per-spot log-ratio transform: log((x+1) / sum_j(x_j+1)).

    Computed over the full gene set, so every output row satisfies
    sum_j exp(out[j]) == 1.  Natural logarithm, float64 output.
    """
    counts = np.asarray(counts)
    if counts.ndim != 2 or counts.size == 0:
        raise ValueError(f"counts must be a non-empty n x m matrix, got shape {counts.shape}")
    if np.any(counts < 0):
        raise ValueError("counts must be non-negative")
    shifted = counts.astype(np.float64) + 1.0
    return np.log(shifted / shifted.sum(axis=1, keepdims=True))


def select_top_genes(matrix: ExpressionMatrix, top_k: int) -> list[str]:
    """Top-k genes by descending mean raw count; ties break by name ascending."""
    if matrix.space != "raw_counts":
        raise ValueError("gene selection operates on raw counts")
    m = len(matrix.gene_names)
    if not 1 <= top_k <= m:
        raise ValueError(f"top_k must be in [1, {m}], got {top_k}")
    means = matrix.values.astype(np.float64).mean(axis=0)
    ranked = sorted(zip(matrix.gene_names, means), key=lambda gm: (-gm[1], gm[0]))
    return [g for g, _ in ranked[:top_k]]


def _require_image(slide: SlideRecord) -> np.ndarray:
    if slide.image is None:
        slide.image = load_image(slide.image_path)
    return slide.image


def crop_spot(slide: SlideRecord, spot: SpotMeta, size: int) -> np.ndarray:
    """size x size x 3 float32 crop in [0,1] centered on the spot.

    The window spans [center - size/2, center + size/2); regions outside
    the slide image are zero-padded so edge spots are never discarded.
    """
    if size <= 0 or size % 2:
        raise ValueError(f"crop size must be a positive even integer, got {size}")
    img = _require_image(slide)
    h, w = img.shape[:2]
    half = size // 2
    y0 = spot.center_y_px - half
    x0 = spot.center_x_px - half
    out = np.zeros((size, size, 3), dtype=np.float32)
    ys, ye = max(y0, 0), min(y0 + size, h)
    xs, xe = max(x0, 0), min(x0 + size, w)
    if ys < ye and xs < xe:
        out[ys - y0 : ye - y0, xs - x0 : xe - x0] = img[ys:ye, xs:xe].astype(np.float32) / 255.0
    return out


def crop_neighbor(slide: SlideRecord, spot: SpotMeta, size: int) -> np.ndarray:
    """Neighbor-context crop; same convention as crop_spot at the larger size."""
    return crop_spot(slide, spot, size)


def build_sample(
    slide: SlideRecord,
    spot: SpotMeta,
    target: np.ndarray,
    spot_size: int,
    neighbor_size: int,
) -> SpotSample:
    return SpotSample(
        spot_image=crop_spot(slide, spot, spot_size),
        neighbor_image=crop_neighbor(slide, spot, neighbor_size),
        target=np.asarray(target),
        spot_id=spot.spot_id,
        slide_id=slide.slide_id,
        patient_id=slide.patient_id,
    )


def load_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except FileNotFoundError:
        raise DataError(f"{path}: image file not found") from None
    except OSError as exc:
        raise DataError(f"{path}: unreadable image ({exc})") from exc
    return arr


def _read_tsv(path: Path, expected_header: list[str]) -> list[tuple[int, list[str]]]:
    """Rows as (1-based line number, fields); header checked exactly."""
    if not path.is_file():
        raise DataError(f"{path}: file missing")
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}:1: empty file") from None
        if header != expected_header:
            raise DataError(f"{path}:1: expected header {expected_header}, got {header}")
        for lineno, fields_ in enumerate(reader, start=2):
            if not fields_ or fields_ == [""]:
                continue
            if len(fields_) != len(expected_header):
                raise DataError(f"{path}:{lineno}: expected {len(expected_header)} fields, got {len(fields_)}")
            rows.append((lineno, fields_))
    return rows


def _parse_int(raw: str, path: Path, lineno: int, what: str, minimum: int | None = None) -> int:
    try:
        value = int(raw)
    except ValueError:
        raise DataError(f"{path}:{lineno}: {what} must be an integer, got {raw!r}") from None
    if minimum is not None and value < minimum:
        raise DataError(f"{path}:{lineno}: {what} must be >= {minimum}, got {value}")
    return value


def load_dataset(root_dir) -> tuple[list[SlideRecord], ExpressionMatrix]:
    """Load and validate a dataset directory (layout in the module docstring)."""
    root = Path(root_dir)
    slides_path = root / "slides.tsv"
    spots_path = root / "spots.tsv"
    counts_path = root / "counts.tsv"

    slides: dict[str, SlideRecord] = {}
    for lineno, (slide_id, patient_id, layer_raw, image_file) in _read_tsv(slides_path, SLIDES_HEADER):
        if slide_id in slides:
            raise DataError(f"{slides_path}:{lineno}: duplicate slide_id {slide_id!r}")
        layer = _parse_int(layer_raw, slides_path, lineno, "layer_index", minimum=0)
        image_path = root / image_file
        slides[slide_id] = SlideRecord(
            slide_id=slide_id,
            patient_id=patient_id,
            layer_index=layer,
            image_path=str(image_path),
            spots=[],
            image=load_image(image_path),
        )
    if not slides:
        raise DataError(f"{slides_path}: no slides listed")

    spot_rows = _read_tsv(spots_path, SPOTS_HEADER)
    if not spot_rows:
        raise DataError(f"{spots_path}: empty spots table")
    seen_spots: set[str] = set()
    for lineno, (slide_id, spot_id, cx_raw, cy_raw) in spot_rows:
        if slide_id not in slides:
            raise DataError(f"{spots_path}:{lineno}: unknown slide_id {slide_id!r}")
        if spot_id in seen_spots:
            raise DataError(f"{spots_path}:{lineno}: duplicate spot_id {spot_id!r}")
        seen_spots.add(spot_id)
        cx = _parse_int(cx_raw, spots_path, lineno, "center_x_px", minimum=0)
        cy = _parse_int(cy_raw, spots_path, lineno, "center_y_px", minimum=0)
        slide = slides[slide_id]
        h, w = slide.image.shape[:2]
        if cx >= w or cy >= h:
            raise DataError(
                f"{spots_path}:{lineno}: spot center ({cx}, {cy}) outside image bounds {w}x{h}"
            )
        slide.spots.append(SpotMeta(spot_id=spot_id, center_x_px=cx, center_y_px=cy))

    if not counts_path.is_file():
        raise DataError(f"{counts_path}: file missing")
    with open(counts_path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{counts_path}:1: empty file") from None
        if not header or header[0] != "spot_id" or len(header) < 2:
            raise DataError(f"{counts_path}:1: header must be spot_id followed by gene names")
        gene_names = header[1:]
        if len(set(gene_names)) != len(gene_names):
            raise DataError(f"{counts_path}:1: duplicate gene names in header")
        spot_ids: list[str] = []
        rows: list[list[int]] = []
        for lineno, fields_ in enumerate(reader, start=2):
            if not fields_ or fields_ == [""]:
                continue
            if len(fields_) != len(header):
                raise DataError(f"{counts_path}:{lineno}: expected {len(header)} fields, got {len(fields_)}")
            spot_id = fields_[0]
            if spot_id not in seen_spots:
                raise DataError(f"{counts_path}:{lineno}: unknown spot_id {spot_id!r}")
            if spot_id in spot_ids:
                raise DataError(f"{counts_path}:{lineno}: duplicate spot_id {spot_id!r}")
            counts = [
                _parse_int(v, counts_path, lineno, f"count for {g}", minimum=0)
                for g, v in zip(gene_names, fields_[1:])
            ]
            spot_ids.append(spot_id)
            rows.append(counts)
    if not rows:
        raise DataError(f"{counts_path}: no expression rows")
    missing = seen_spots - set(spot_ids)
    if missing:
        example = sorted(missing)[0]
        raise DataError(f"{counts_path}: no expression row for spot {example!r} ({len(missing)} missing)")

    matrix = ExpressionMatrix(
        values=np.asarray(rows, dtype=np.int64),
        gene_names=gene_names,
        spot_ids=spot_ids,
        space="raw_counts",
    )
    matrix.validate()
    return sorted(slides.values(), key=lambda s: s.slide_id), matrix


def write_dataset(slides: list[SlideRecord], matrix: ExpressionMatrix, out_dir) -> None:
    """Write slides/spots/counts TSVs and PNG images under out_dir."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)

    with open(out / "slides.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(SLIDES_HEADER) + "\n")
        for slide in slides:
            image_file = f"images/{slide.slide_id}.png"
            if slide.image is None:
                raise ValueError(f"slide {slide.slide_id} has no image to write")
            Image.fromarray(slide.image, mode="RGB").save(out / image_file)
            slide.image_path = str(out / image_file)
            fh.write(f"{slide.slide_id}\t{slide.patient_id}\t{slide.layer_index}\t{image_file}\n")

    with open(out / "spots.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(SPOTS_HEADER) + "\n")
        for slide in slides:
            for spot in slide.spots:
                fh.write(f"{slide.slide_id}\t{spot.spot_id}\t{spot.center_x_px}\t{spot.center_y_px}\n")

    with open(out / "counts.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("spot_id\t" + "\t".join(matrix.gene_names) + "\n")
        for sid, row in zip(matrix.spot_ids, matrix.values):
            fh.write(sid + "\t" + "\t".join(str(int(v)) for v in row) + "\n")
