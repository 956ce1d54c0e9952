"""Command-line workflow: synth, preprocess, train, eval, ablate, plot.

Configuration precedence, lowest to highest: built-in defaults (or the
desk preset), then a TOML file given with --config, then individual
flags. Every config key has a flag of the same name.

Exit codes: 0 success, 2 usage or bad parameter value, 3 data error,
4 numerical failure during optimization.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .checkpoint import restore_model
from .config import (
    EncoderConfig,
    ModelConfig,
    TrainConfig,
    config_to_dict,
    configs_from_dict,
)
from .dataset import (
    ExpressionMatrix,
    load_dataset,
    normalize_expression,
    select_top_genes,
    write_dataset,
)
from .errors import DataError, NumericalError
from .evaluation import (
    AXIS_VALUES,
    ablation_to_json,
    ablation_to_text,
    ablation_to_tsv,
    evaluate_predictions,
    make_splits,
    marker_gene_report,
    marker_table_text,
    predict_samples,
    report_to_json,
    report_to_tsv,
    run_ablation,
)
from .manifest import dataset_fingerprint, new_manifest, write_manifest
from .model import HiFusion
from .plotting import plot_spatial_expression
from .synthetic import synthesize_dataset
from .training import assemble_samples, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

_MODEL_SIMPLE = ("spot_size", "neighbor_size", "n_genes", "heads", "k", "fusion",
                 "region_branch", "qk_reversed", "align_reduction", "layernorm_eps")
_ENCODERS = ("spot_encoder", "region_encoder")


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {value}")
    return value


def _int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    """One flag per config key, defaulting to SUPPRESS so only explicit
    flags override the config file."""
    parser.add_argument("--config", metavar="TOML", help="config file with [model]/[train] tables")
    parser.add_argument("--preset", choices=("paper", "desk"), default="paper",
                        help="base model size: published defaults or the CPU-sized desk preset")

    model_defaults = ModelConfig()
    group = parser.add_argument_group("model config")
    group.add_argument("--levels", type=_int_list, default=argparse.SUPPRESS,
                       help=f"decomposition grids, e.g. 1,2,7 (default: {model_defaults.levels})")
    for f in fields(ModelConfig):
        if f.name not in _MODEL_SIMPLE:
            continue
        default = getattr(model_defaults, f.name)
        _add_typed_flag(group, _flag(f.name), default)
    for enc in _ENCODERS:
        enc_defaults = getattr(model_defaults, enc)
        for f in fields(EncoderConfig):
            default = getattr(enc_defaults, f.name)
            flag = _flag(f"{enc}_{f.name}")
            if f.name == "stage_strides":
                group.add_argument(flag, type=_int_list, default=argparse.SUPPRESS,
                                   help=f"per-stage strides, e.g. 1,2,2,2 (default: {list(default)})")
            else:
                _add_typed_flag(group, flag, default)

    train_defaults = TrainConfig()
    group = parser.add_argument_group("train config")
    for f in fields(TrainConfig):
        _add_typed_flag(group, _flag(f.name), getattr(train_defaults, f.name))


def _add_typed_flag(group, flag: str, default) -> None:
    if isinstance(default, bool):
        group.add_argument(flag, action=argparse.BooleanOptionalAction, default=argparse.SUPPRESS,
                           help=f"(default: {default})")
    else:
        group.add_argument(flag, type=type(default), default=argparse.SUPPRESS,
                           help=f"(default: {default})")


def _deep_update(dst: dict, src: dict) -> dict:
    for key, value in src.items():
        if isinstance(value, dict) and isinstance(dst.get(key), dict):
            _deep_update(dst[key], value)
        else:
            dst[key] = value
    return dst


def _merged_configs(args) -> tuple[ModelConfig, TrainConfig]:
    data: dict = {"model": {}, "train": {}}
    if getattr(args, "preset", "paper") == "desk":
        data["model"] = config_to_dict(ModelConfig.desk(), TrainConfig())["model"]
    if getattr(args, "config", None):
        with open(args.config, "rb") as fh:
            _deep_update(data, tomllib.load(fh))

    present = vars(args)
    model_keys = {"levels", *_MODEL_SIMPLE}
    train_keys = {f.name for f in fields(TrainConfig)}
    for key, value in present.items():
        if key in model_keys:
            data["model"][key] = value
        elif key in train_keys:
            data["train"][key] = value
        else:
            for enc in _ENCODERS:
                prefix = enc + "_"
                if key.startswith(prefix) and key[len(prefix):] in {f.name for f in fields(EncoderConfig)}:
                    data["model"].setdefault(enc, {})[key[len(prefix):]] = value
    return configs_from_dict(data)


def _prepare_out(path_str: str, force: bool) -> Path:
    out = Path(path_str)
    if out.exists() and any(out.iterdir()) and not force:
        raise DataError(f"{out} exists and is not empty; pass --force to reuse it")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_normalized(data_dir, gene_names: list[str] | None, top_genes: int | None):
    """Load raw counts, normalize against the full gene set, then subset."""
    slides, counts = load_dataset(data_dir)
    if gene_names is None:
        keep = len(counts.gene_names) if top_genes is None else top_genes
        gene_names = select_top_genes(counts, keep)
    normalized_full = ExpressionMatrix(
        normalize_expression(counts.values), counts.gene_names, counts.spot_ids, "normalized"
    )
    try:
        return slides, normalized_full.subset_genes(gene_names)
    except ValueError as err:
        # a checkpoint asking for genes the dataset lacks is a data mismatch
        raise DataError(str(err)) from err


def _read_gene_list(processed_dir) -> list[str]:
    path = Path(processed_dir) / "genes.tsv"
    if not path.is_file():
        raise DataError(f"{path}: file missing")
    lines = path.read_text().splitlines()
    if not lines or lines[0] != "gene_name":
        raise DataError(f"{path}: expected header 'gene_name'")
    return lines[1:]


def cmd_synth(args) -> int:
    out = _prepare_out(args.out, args.force)
    slides, matrix = synthesize_dataset(
        args.patients, args.layers, args.spots, args.genes,
        seed=args.seed, style_shift=args.style_shift,
    )
    write_dataset(slides, matrix, out)
    fingerprint = dataset_fingerprint(out)
    config = {
        "patients": args.patients, "layers": args.layers, "spots": args.spots,
        "genes": args.genes, "style_shift": args.style_shift,
    }
    write_manifest(out, new_manifest("synth", config, args.seed, fingerprint))
    print(f"wrote dataset to {out}")
    print(f"dataset fingerprint: {fingerprint}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    out = _prepare_out(args.out, args.force)
    slides, counts = load_dataset(args.data)
    genes = select_top_genes(counts, args.top_genes)
    normalized = ExpressionMatrix(
        normalize_expression(counts.values), counts.gene_names, counts.spot_ids, "normalized"
    ).subset_genes(genes)

    genes_path = out / "genes.tsv"
    genes_path.write_text("\n".join(["gene_name", *genes]) + "\n")

    with open(out / "targets.tsv", "w", encoding="utf-8") as fh:
        fh.write("\t".join(["spot_id", *genes]) + "\n")
        for i, spot_id in enumerate(normalized.spot_ids):
            row = "\t".join(f"{v:.17g}" for v in normalized.values[i])
            fh.write(f"{spot_id}\t{row}\n")

    with open(out / "crop_index.tsv", "w", encoding="utf-8") as fh:
        fh.write("slide_id\tspot_id\tcenter_x_px\tcenter_y_px\n")
        for slide in slides:
            for spot in slide.spots:
                fh.write(f"{slide.slide_id}\t{spot.spot_id}\t{spot.center_x_px}\t{spot.center_y_px}\n")

    fingerprint = dataset_fingerprint(args.data)
    write_manifest(out, new_manifest("preprocess", {"top_genes": args.top_genes}, 0, fingerprint))
    print(f"selected {len(genes)} genes; gene list at {genes_path}")
    return EXIT_OK


def cmd_train(args) -> int:
    model_config, train_config = _merged_configs(args)
    out = _prepare_out(args.out, args.force)

    gene_names = _read_gene_list(args.processed) if args.processed else None
    slides, normalized = _load_normalized(args.data, gene_names, args.top_genes)
    model_config = dataclasses.replace(model_config, n_genes=len(normalized.gene_names))
    model_config.validate()

    include = (lambda s: s.layer_index == 0) if args.protocol == "3d" else None
    samples = assemble_samples(slides, normalized, include=include)

    fingerprint = dataset_fingerprint(args.data)
    write_manifest(out, new_manifest(
        "train", config_to_dict(model_config, train_config), train_config.seed, fingerprint,
    ))

    torch.manual_seed(train_config.seed)
    model = HiFusion(model_config)
    result = train(model, samples, model_config, train_config, out)
    last = result.history[-1]
    print(f"trained {len(result.history)} steps on {len(samples)} spots "
          f"({len(normalized.gene_names)} genes)")
    print(f"final total loss {last['total']:.6f}; best checkpoint: {result.best_path}")
    return EXIT_OK


def _parse_layers(text: str) -> list[int] | None:
    if text == "all":
        return None
    return [int(part) for part in text.split(",")]


def cmd_eval(args) -> int:
    model, manifest, _ = restore_model(args.checkpoint)
    model_config, _ = configs_from_dict(manifest["config"])
    slides, normalized = _load_normalized(args.data, manifest["gene_names"], None)

    layers = _parse_layers(args.layers)
    include = None if layers is None else (lambda s: s.layer_index in layers)
    samples = assemble_samples(slides, normalized, include=include)
    if len(samples) == 0:
        raise DataError("no spots match the requested layers")

    pred = predict_samples(model, samples, model_config, batch_size=args.batch_size)
    report = evaluate_predictions(
        pred,
        samples.targets.astype(np.float64),
        list(normalized.gene_names),
        [samples.patient_of(i) for i in range(len(samples))],
        pcc_axis=args.pcc_axis,
    )

    payload = report_to_json(report)
    if args.markers:
        marker = marker_gene_report(report, args.markers.split(","))
        payload["markers"] = marker
        print(marker_table_text(marker), end="")
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    if args.tsv:
        Path(args.tsv).write_text(report_to_tsv(report))
    print(f"spots {report.n_spots}  MSE {report.mse:.4f}  MAE {report.mae:.4f}  "
          f"PCC {report.pcc:.4f} (axis={report.pcc_axis})")
    print(f"report written to {report_path}")
    return EXIT_OK


def _parse_axis_values(axis: str, text: str | None):
    if text is None:
        return None
    if axis == "levels":
        return [[int(g) for g in combo.split(",")] for combo in text.split(";")]
    if axis in ("token_k", "neighbor_N"):
        return [int(v) for v in text.split(",")]
    if axis in ("feature_alignment", "region_branch"):
        return [v.lower() in ("1", "true", "on") for v in text.split(",")]
    return text.split(",")


def cmd_ablate(args) -> int:
    model_config, train_config = _merged_configs(args)
    out = _prepare_out(args.out, args.force)

    gene_names = _read_gene_list(args.processed) if args.processed else None
    slides, normalized = _load_normalized(args.data, gene_names, args.top_genes)
    model_config = dataclasses.replace(model_config, n_genes=len(normalized.gene_names))
    model_config.validate()

    protocol = "slide_wise_cv" if args.protocol == "2d" else "sample_specific_3d"
    plan = make_splits(slides, protocol, n_folds=args.folds, seed=train_config.seed)
    values = _parse_axis_values(args.axis, args.values)

    fingerprint = dataset_fingerprint(args.data)
    write_manifest(out, new_manifest(
        "ablate",
        {"axis": args.axis, "values": values, "protocol": protocol,
         **config_to_dict(model_config, train_config)},
        train_config.seed, fingerprint,
    ))

    torch.manual_seed(train_config.seed)
    rows = run_ablation(
        args.axis, values, lambda cfg: HiFusion(cfg), slides, normalized, plan,
        model_config, train_config, out_dir=out / "runs",
    )
    (out / "ablation.json").write_text(json.dumps(ablation_to_json(rows), indent=2, sort_keys=True) + "\n")
    (out / "ablation.tsv").write_text(ablation_to_tsv(rows))
    text = ablation_to_text(rows)
    (out / "ablation.txt").write_text(text)
    print(text, end="")
    print(f"ablation artifacts written to {out}")
    return EXIT_OK


def cmd_plot(args) -> int:
    model, manifest, _ = restore_model(args.checkpoint)
    model_config, _ = configs_from_dict(manifest["config"])
    slides, normalized = _load_normalized(args.data, manifest["gene_names"], None)

    slide_id = args.slide or slides[0].slide_id
    matches = [s for s in slides if s.slide_id == slide_id]
    if not matches:
        raise DataError(f"slide {slide_id!r} not in dataset")
    slide = matches[0]

    samples = assemble_samples(slides, normalized, include=lambda s: s.slide_id == slide_id)
    pred = predict_samples(model, samples, model_config, batch_size=args.batch_size)
    genes = args.genes.split(",")
    out = plot_spatial_expression(
        slide, samples.targets.astype(np.float64), pred,
        list(normalized.gene_names), genes, args.out,
    )
    print(f"wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hifusion",
                                     description="Spot-level gene expression prediction workflow")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--patients", type=_positive_int, default=4)
    p.add_argument("--layers", type=_positive_int, default=3)
    p.add_argument("--spots", type=_positive_int, default=64)
    p.add_argument("--genes", type=_positive_int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--style-shift", type=float, default=0.0,
                   help="per-patient stain gain/offset amplitude")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="select genes and write normalized targets")
    p.add_argument("--data", required=True)
    p.add_argument("--top-genes", type=_positive_int, default=250,
                   help="genes kept by mean raw count (default: 250)")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--processed", help="preprocess output dir; its gene list wins")
    p.add_argument("--top-genes", type=_positive_int, default=None,
                   help="genes kept when --processed is absent (250 in the published setup; default: all)")
    p.add_argument("--protocol", choices=("2d", "3d"), default="2d",
                   help="3d trains on layer-0 spots only")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--report", required=True, help="output JSON path")
    p.add_argument("--tsv", help="optional TSV summary path")
    p.add_argument("--layers", default="all", help="comma-separated layer indices, or 'all'")
    p.add_argument("--markers", help="comma-separated genes for a per-gene table")
    p.add_argument("--pcc-axis", choices=("gene", "spot"), default="gene")
    p.add_argument("--batch-size", type=_positive_int, default=32)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep one design axis with full retraining")
    p.add_argument("--axis", required=True, choices=sorted(AXIS_VALUES))
    p.add_argument("--values", help="override the default grid; comma-separated "
                   "(levels: semicolon-separated combos like 1;1,2;1,2,7)")
    p.add_argument("--data", required=True)
    p.add_argument("--processed")
    p.add_argument("--top-genes", type=_positive_int, default=None)
    p.add_argument("--protocol", choices=("2d", "3d"), default="2d")
    p.add_argument("--folds", type=_positive_int, default=4)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="render measured-vs-predicted expression maps")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--genes", required=True, help="comma-separated gene names")
    p.add_argument("--slide", help="slide id (default: first slide)")
    p.add_argument("--out", required=True, help="output PNG path")
    p.add_argument("--batch-size", type=_positive_int, default=32)
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as err:
        print(f"invalid parameters: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
