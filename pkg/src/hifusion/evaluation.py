"""Metrics, evaluation protocols, and the ablation runner.

Protocols: patient-disjoint k-fold cross-validation over slides
("slide_wise_cv") and the per-patient layer-holdout protocol
("sample_specific_3d", train on layer 0, test on deeper layers).
Headline numbers average per patient, never per spot, so patients with
many spots do not dominate.
"""

from __future__ import annotations

import dataclasses
import math
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig, TrainConfig
from .dataset import SlideRecord
from .training import assemble_samples, collate, train

PROTOCOLS = ("slide_wise_cv", "sample_specific_3d")

# every level combination that keeps level 1 (the whole spot) present
LEVEL_COMBINATIONS = (
    [1],
    [1, 2],
    [1, 4],
    [1, 7],
    [1, 2, 4],
    [1, 2, 7],
    [1, 4, 7],
    [1, 2, 4, 7],
)

AXIS_VALUES = {
    "levels": LEVEL_COMBINATIONS,
    "feature_alignment": (True, False),
    "token_k": (2, 3, 4, 5, 6, 7),
    "neighbor_N": (1, 2, 3, 4, 5),
    "region_branch": (True, False),
    "fusion_mode": ("attention", "additive"),
    "qk_reversed": ("none", "ccf", "input"),
}


def metric_mse(pred: np.ndarray, truth: np.ndarray) -> float:
    """Mean over all n*m entries of the squared error."""
    pred, truth = _paired(pred, truth)
    return float(np.mean((pred - truth) ** 2))


def metric_mae(pred: np.ndarray, truth: np.ndarray) -> float:
    """Mean over all n*m entries of the absolute error."""
    pred, truth = _paired(pred, truth)
    return float(np.mean(np.abs(pred - truth)))


def _paired(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    if pred.ndim != 2 or pred.shape[0] < 1:
        raise ValueError("expected non-empty n x m arrays")
    return pred, truth


def metric_pcc(
    pred: np.ndarray, truth: np.ndarray, axis: str = "gene"
) -> tuple[float, np.ndarray, int]:
    """Pearson r per gene across spots (axis="gene") or per spot across genes.

    Returns (mean over defined series, per-series r with NaN where excluded,
    excluded count). A series is excluded when either side has exactly zero
    variance, so constant genes never poison the mean with NaN.
    """
    pred, truth = _paired(pred, truth)
    if axis not in ("gene", "spot"):
        raise ValueError(f"pcc axis must be 'gene' or 'spot', got {axis!r}")
    if axis == "spot":
        pred, truth = pred.T, truth.T
    if pred.shape[0] < 2:
        raise ValueError("pearson correlation needs at least 2 observations per series")

    xc = pred - pred.mean(axis=0)
    yc = truth - truth.mean(axis=0)
    sxx = (xc**2).sum(axis=0)
    syy = (yc**2).sum(axis=0)
    defined = (sxx > 0) & (syy > 0)
    per_series = np.full(pred.shape[1], np.nan)
    if defined.any():
        r = (xc[:, defined] * yc[:, defined]).sum(axis=0) / np.sqrt(
            sxx[defined] * syy[defined]
        )
        per_series[defined] = np.clip(r, -1.0, 1.0)
    mean = float(per_series[defined].mean()) if defined.any() else math.nan
    return mean, per_series, int((~defined).sum())


@dataclass(frozen=True)
class Fold:
    """One train/test assignment. Layer tuples of None mean every layer."""

    name: str
    train_patients: tuple[str, ...]
    test_patients: tuple[str, ...]
    train_layers: tuple[int, ...] | None = None
    test_layers: tuple[int, ...] | None = None

    def in_train(self, slide: SlideRecord) -> bool:
        return slide.patient_id in self.train_patients and (
            self.train_layers is None or slide.layer_index in self.train_layers
        )

    def in_test(self, slide: SlideRecord) -> bool:
        return slide.patient_id in self.test_patients and (
            self.test_layers is None or slide.layer_index in self.test_layers
        )


@dataclass(frozen=True)
class SplitPlan:
    protocol: str
    folds: tuple[Fold, ...]

    def validate(self) -> None:
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}")
        if not self.folds:
            raise ValueError("split plan has no folds")
        if self.protocol == "slide_wise_cv":
            tested = []
            for fold in self.folds:
                overlap = set(fold.train_patients) & set(fold.test_patients)
                if overlap:
                    raise ValueError(f"{fold.name}: patients on both sides: {sorted(overlap)}")
                tested.extend(fold.test_patients)
            if len(tested) != len(set(tested)):
                raise ValueError("a patient is tested in more than one fold")
        else:
            for fold in self.folds:
                if fold.train_layers != (0,):
                    raise ValueError(f"{fold.name}: 3d protocol trains on layer 0 only")
                if not fold.test_layers or any(l < 1 for l in fold.test_layers):
                    raise ValueError(f"{fold.name}: 3d protocol tests on layers >= 1")
                if fold.train_patients != fold.test_patients:
                    raise ValueError(f"{fold.name}: 3d protocol stays within one patient")


def make_splits(
    slides: list[SlideRecord], protocol: str, n_folds: int = 4, seed: int = 0
) -> SplitPlan:
    """Deterministic split construction; patients never straddle a fold."""
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}; choose one of {PROTOCOLS}")
    patients = sorted({s.patient_id for s in slides})
    if not patients:
        raise ValueError("no slides given")

    if protocol == "slide_wise_cv":
        if n_folds < 2:
            raise ValueError("cross-validation needs at least 2 folds")
        if len(patients) < n_folds:
            raise ValueError(
                f"{n_folds}-fold cross-validation needs >= {n_folds} patients, got {len(patients)}"
            )
        rng = np.random.default_rng([seed, 0xF01D])
        shuffled = [patients[i] for i in rng.permutation(len(patients))]
        buckets: list[list[str]] = [[] for _ in range(n_folds)]
        for j, patient in enumerate(shuffled):
            buckets[j % n_folds].append(patient)
        folds = []
        for i, bucket in enumerate(buckets):
            test = tuple(sorted(bucket))
            trainp = tuple(sorted(set(patients) - set(bucket)))
            folds.append(Fold(name=f"fold_{i}", train_patients=trainp, test_patients=test))
        plan = SplitPlan(protocol=protocol, folds=tuple(folds))
    else:
        layers_of: dict[str, set[int]] = {p: set() for p in patients}
        for slide in slides:
            layers_of[slide.patient_id].add(slide.layer_index)
        folds = []
        for patient in patients:
            layers = sorted(layers_of[patient])
            if len(layers) < 2:
                raise ValueError(f"patient {patient} has a single layer; 3d protocol needs >= 2")
            if layers[0] != 0:
                raise ValueError(f"patient {patient} has no layer 0 to train on")
            folds.append(
                Fold(
                    name=patient,
                    train_patients=(patient,),
                    test_patients=(patient,),
                    train_layers=(0,),
                    test_layers=tuple(l for l in layers if l >= 1),
                )
            )
        plan = SplitPlan(protocol=protocol, folds=tuple(folds))
    plan.validate()
    return plan


@dataclass
class MetricReport:
    """Headline numbers are per-patient averages; per_gene pools every spot."""

    mse: float
    mae: float
    pcc: float
    per_gene: dict[str, dict[str, float]]
    per_patient: dict[str, dict[str, float]]
    pcc_axis: str = "gene"
    n_spots: int = 0
    pcc_excluded: int = 0


def evaluate_predictions(
    pred: np.ndarray,
    truth: np.ndarray,
    gene_names: list[str],
    patients: list[str],
    pcc_axis: str = "gene",
) -> MetricReport:
    pred, truth = _paired(pred, truth)
    n, m = pred.shape
    if len(patients) != n:
        raise ValueError("one patient id per prediction row is required")
    if len(gene_names) != m:
        raise ValueError("one gene name per prediction column is required")

    per_gene_mse = ((pred - truth) ** 2).mean(axis=0)
    per_gene_mae = np.abs(pred - truth).mean(axis=0)
    if n >= 2:
        _, per_gene_pcc, excluded = metric_pcc(pred, truth, axis="gene")
    else:
        per_gene_pcc, excluded = np.full(m, np.nan), m
    per_gene = {
        g: {
            "mse": float(per_gene_mse[j]),
            "mae": float(per_gene_mae[j]),
            "pcc": float(per_gene_pcc[j]),
        }
        for j, g in enumerate(gene_names)
    }

    per_patient: dict[str, dict[str, float]] = {}
    order = sorted(set(patients))
    patients_arr = np.asarray(patients)
    for patient in order:
        rows = patients_arr == patient
        p_pred, p_truth = pred[rows], truth[rows]
        if p_pred.shape[0] >= 2 and pcc_axis == "gene":
            p_pcc, _, _ = metric_pcc(p_pred, p_truth, axis="gene")
        elif p_pred.shape[1] >= 2 and pcc_axis == "spot":
            p_pcc, _, _ = metric_pcc(p_pred, p_truth, axis="spot")
        else:
            p_pcc = math.nan
        per_patient[patient] = {
            "mse": metric_mse(p_pred, p_truth),
            "mae": metric_mae(p_pred, p_truth),
            "pcc": p_pcc,
            "n_spots": int(rows.sum()),
        }

    pcc_values = [v["pcc"] for v in per_patient.values() if not math.isnan(v["pcc"])]
    return MetricReport(
        mse=float(np.mean([v["mse"] for v in per_patient.values()])),
        mae=float(np.mean([v["mae"] for v in per_patient.values()])),
        pcc=float(np.mean(pcc_values)) if pcc_values else math.nan,
        per_gene=per_gene,
        per_patient=per_patient,
        pcc_axis=pcc_axis,
        n_spots=n,
        pcc_excluded=excluded,
    )


def predict_samples(model, sample_set, model_config: ModelConfig, batch_size: int = 32):
    """Batched no-grad forward over every sample; rows align with sample_set."""
    model.eval()
    preds = []
    with torch.no_grad():
        for start in range(0, len(sample_set), batch_size):
            idx = list(range(start, min(start + batch_size, len(sample_set))))
            spot, region, _ = collate(
                sample_set, idx, model_config.spot_size, model_config.neighbor_size
            )
            preds.append(model(spot, region).prediction.double().numpy())
    if not preds:
        return np.zeros((0, len(sample_set.gene_names)))
    return np.concatenate(preds)


def run_protocol(
    model_factory,
    slides: list[SlideRecord],
    normalized,
    plan: SplitPlan,
    model_config: ModelConfig,
    train_config: TrainConfig,
    out_dir=None,
    trainer=train,
    pcc_axis: str = "gene",
) -> MetricReport:
    """Train a fresh model per fold and score the held-out side.

    trainer=None skips optimization (useful for stub models); folds are
    independent, and the merged report does not depend on fold order because
    every test spot appears exactly once.
    """
    plan.validate()
    all_pred, all_truth, all_patients = [], [], []
    for fold in plan.folds:
        train_set = assemble_samples(slides, normalized, include=fold.in_train)
        test_set = assemble_samples(slides, normalized, include=fold.in_test)
        if len(test_set) == 0:
            raise ValueError(f"fold {fold.name} holds no test spots")
        model = model_factory(model_config)
        if trainer is not None:
            if len(train_set) == 0:
                raise ValueError(f"fold {fold.name} holds no training spots")
            if out_dir is not None:
                fold_dir = Path(out_dir) / fold.name
                trainer(model, train_set, model_config, train_config, fold_dir)
            else:
                with tempfile.TemporaryDirectory() as tmp:
                    trainer(model, train_set, model_config, train_config, tmp)
        pred = predict_samples(model, test_set, model_config, train_config.batch_size)
        all_pred.append(pred)
        all_truth.append(test_set.targets.astype(np.float64))
        all_patients.extend(test_set.patient_of(i) for i in range(len(test_set)))
    return evaluate_predictions(
        np.concatenate(all_pred),
        np.concatenate(all_truth),
        list(normalized.gene_names),
        all_patients,
        pcc_axis=pcc_axis,
    )


def apply_axis(
    axis: str, value, model_config: ModelConfig, train_config: TrainConfig
) -> tuple[ModelConfig, TrainConfig]:
    """Derive the config pair for one ablation setting; both are validated."""
    if axis not in AXIS_VALUES:
        raise ValueError(f"unknown ablation axis {axis!r}; choose one of {sorted(AXIS_VALUES)}")
    mc, tc = model_config, train_config
    if axis == "levels":
        mc = dataclasses.replace(mc, levels=list(value))
    elif axis == "feature_alignment":
        tc = dataclasses.replace(tc, lambda_align=tc.lambda_align if value else 0.0)
    elif axis == "token_k":
        mc = dataclasses.replace(mc, k=int(value))
    elif axis == "neighbor_N":
        mc = dataclasses.replace(mc, neighbor_size=mc.spot_size * int(value))
    elif axis == "region_branch":
        mc = dataclasses.replace(mc, region_branch=bool(value))
    elif axis == "fusion_mode":
        mc = dataclasses.replace(mc, fusion=str(value))
    elif axis == "qk_reversed":
        mc = dataclasses.replace(mc, qk_reversed=str(value))
    mc.validate()
    tc.validate()
    return mc, tc


def axis_label(axis: str, value, model_config: ModelConfig) -> str:
    if axis == "levels":
        return " + ".join(f"{g}x{g}" for g in value)
    if axis == "feature_alignment":
        return "with alignment loss" if value else "without alignment loss"
    if axis == "token_k":
        return f"k={value} ({value}x{value} tokens)"
    if axis == "neighbor_N":
        size = model_config.spot_size * int(value)
        return f"N={value} ({size}x{size})"
    if axis == "region_branch":
        return "with region branch" if value else "spot branch only"
    if axis == "fusion_mode":
        return f"{value} fusion"
    if axis == "qk_reversed":
        return {"none": "standard q/k", "ccf": "q/k swapped in fusion", "input": "q/k swapped at input"}[value]
    raise ValueError(f"unknown ablation axis {axis!r}")


@dataclass
class AblationRow:
    axis: str
    value: object
    label: str
    report: MetricReport


def run_ablation(
    axis: str,
    values,
    model_factory,
    slides: list[SlideRecord],
    normalized,
    plan: SplitPlan,
    model_config: ModelConfig,
    train_config: TrainConfig,
    out_dir=None,
    trainer=train,
) -> list[AblationRow]:
    """One full protocol run per axis value; values=None uses the default grid."""
    if axis not in AXIS_VALUES:
        raise ValueError(f"unknown ablation axis {axis!r}; choose one of {sorted(AXIS_VALUES)}")
    if values is None:
        values = AXIS_VALUES[axis]
    rows = []
    for value in values:
        mc, tc = apply_axis(axis, value, model_config, train_config)
        row_dir = None
        if out_dir is not None:
            row_dir = Path(out_dir) / f"{axis}_{_value_slug(value)}"
        report = run_protocol(
            model_factory, slides, normalized, plan, mc, tc, out_dir=row_dir, trainer=trainer
        )
        rows.append(AblationRow(axis=axis, value=value, label=axis_label(axis, value, model_config), report=report))
    return rows


def _value_slug(value) -> str:
    if isinstance(value, (list, tuple)):
        return "-".join(str(v) for v in value)
    return str(value).lower()


def marker_gene_report(report: MetricReport, gene_names: list[str]) -> dict:
    """Per-gene rows for the requested genes; unknown names are listed, not fatal."""
    rows, missing = {}, []
    for gene in gene_names:
        if gene in report.per_gene:
            rows[gene] = dict(report.per_gene[gene])
        else:
            missing.append(gene)
    return {"rows": rows, "missing": missing}


def _nan_to_none(obj):
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_nan_to_none(v) for v in obj]
    return obj


def report_to_json(report: MetricReport) -> dict:
    """Full per-gene detail; NaN (undefined correlation) serializes as null."""
    return _nan_to_none(dataclasses.asdict(report))


def report_to_tsv(report: MetricReport) -> str:
    """Summary rows only: the overall line plus one line per patient."""
    lines = ["scope\tname\tmse\tmae\tpcc\tn_spots"]
    lines.append(
        f"overall\t-\t{report.mse:.6f}\t{report.mae:.6f}\t{_fmt(report.pcc)}\t{report.n_spots}"
    )
    for patient, row in sorted(report.per_patient.items()):
        lines.append(
            f"patient\t{patient}\t{row['mse']:.6f}\t{row['mae']:.6f}\t{_fmt(row['pcc'])}\t{row['n_spots']}"
        )
    return "\n".join(lines) + "\n"


def _fmt(value: float, digits: int = 6) -> str:
    return "nan" if isinstance(value, float) and math.isnan(value) else f"{value:.{digits}f}"


def ablation_to_json(rows: list[AblationRow]) -> list[dict]:
    return [
        {
            "axis": row.axis,
            "value": _nan_to_none(row.value if not isinstance(row.value, tuple) else list(row.value)),
            "label": row.label,
            "report": report_to_json(row.report),
        }
        for row in rows
    ]


def ablation_to_tsv(rows: list[AblationRow]) -> str:
    lines = ["axis\tvalue\tlabel\tmse\tmae\tpcc"]
    for row in rows:
        value = _value_slug(row.value)
        r = row.report
        lines.append(f"{row.axis}\t{value}\t{row.label}\t{r.mse:.6f}\t{r.mae:.6f}\t{_fmt(r.pcc)}")
    return "\n".join(lines) + "\n"


def ablation_to_text(rows: list[AblationRow]) -> str:
    """Aligned table with one line per setting, best MSE marked."""
    labels = [row.label for row in rows]
    width = max(len("variant"), *(len(l) for l in labels))
    header = f"{'variant'.ljust(width)}  {'MSE':>8}  {'MAE':>8}  {'PCC':>8}"
    rule = "-" * len(header)
    best = min(range(len(rows)), key=lambda i: rows[i].report.mse) if rows else -1
    lines = [header, rule]
    for i, row in enumerate(rows):
        r = row.report
        mark = " *" if i == best else ""
        lines.append(
            f"{row.label.ljust(width)}  {r.mse:8.4f}  {r.mae:8.4f}  {_fmt(r.pcc, 4):>8}{mark}"
        )
    return "\n".join(lines) + "\n"


def marker_table_text(marker: dict) -> str:
    genes = sorted(marker["rows"])
    width = max(len("gene"), *(len(g) for g in genes)) if genes else len("gene")
    lines = [f"{'gene'.ljust(width)}  {'MSE':>8}  {'MAE':>8}  {'PCC':>8}", ""]
    lines[1] = "-" * len(lines[0])
    for gene in genes:
        row = marker["rows"][gene]
        lines.append(
            f"{gene.ljust(width)}  {row['mse']:8.4f}  {row['mae']:8.4f}  {_fmt(row['pcc'], 4):>8}"
        )
    for gene in marker["missing"]:
        lines.append(f"{gene.ljust(width)}  missing from the selected gene set")
    return "\n".join(lines) + "\n"
