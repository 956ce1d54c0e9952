"""Fix the learning-sanity PCC threshold before any model training exists.

Runs a deliberately simple non-neural probe (ridge regression on mean-color
crop features) through the 3D protocol on the synthetic generator: fit on
each patient's layer 0, predict that patient's higher layers, score mean
per-gene PCC.  The resulting number bounds what a real model should reach
from morphology alone; the recorded threshold below it becomes the bar the
acceptance suite holds the trained network to.

Writes configs/preregistered_oracle.json.  Rerunning must reproduce the
stored numbers exactly (fixed seed, pure numpy).
"""

import argparse
import json
from pathlib import Path

import numpy as np

from hifusion.dataset import crop_spot, normalize_expression
from hifusion.synthetic import synthesize_dataset

GENERATOR_PARAMS = {
    "n_patients": 4,
    "layers_per_patient": 3,
    "spots_per_slide": 64,
    "n_genes": 8,
    "seed": 7,
}
RIDGE_LAMBDA = 1e-3
THRESHOLD = 0.8


def spot_features(slide, spot):
    inner = crop_spot(slide, spot, 32)
    outer = crop_spot(slide, spot, 64)
    return np.concatenate([inner.mean(axis=(0, 1)), outer.mean(axis=(0, 1)), [1.0]])


def ridge_fit(x, y, lam):
    d = x.shape[1]
    return np.linalg.solve(x.T @ x + lam * np.eye(d), x.T @ y)


def mean_gene_pcc(pred, truth):
    pccs = []
    for j in range(truth.shape[1]):
        t = truth[:, j]
        p = pred[:, j]
        if t.std() == 0 or p.std() == 0:
            continue
        pccs.append(float(np.corrcoef(p, t)[0, 1]))
    return float(np.mean(pccs)), len(pccs)


def run_probe(style_shift=0.0):
    slides, counts = synthesize_dataset(**GENERATOR_PARAMS, style_shift=style_shift)
    normalized = normalize_expression(counts.values)
    row = {sid: i for i, sid in enumerate(counts.spot_ids)}

    per_patient = {}
    for patient in sorted({s.patient_id for s in slides}):
        train_x, train_y, test_x, test_y = [], [], [], []
        for slide in slides:
            if slide.patient_id != patient:
                continue
            for spot in slide.spots:
                feats = spot_features(slide, spot)
                target = normalized[row[spot.spot_id]]
                if slide.layer_index == 0:
                    train_x.append(feats)
                    train_y.append(target)
                else:
                    test_x.append(feats)
                    test_y.append(target)
        w = ridge_fit(np.asarray(train_x), np.asarray(train_y), RIDGE_LAMBDA)
        pred = np.asarray(test_x) @ w
        pcc, n_genes = mean_gene_pcc(pred, np.asarray(test_y))
        per_patient[patient] = {"pcc": round(pcc, 6), "genes_scored": n_genes}
    overall = float(np.mean([v["pcc"] for v in per_patient.values()]))
    return per_patient, overall


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument(
        "--out",
        default=str(Path(__file__).resolve().parents[1] / "configs" / "preregistered_oracle.json"),
    )
    args = parser.parse_args()

    per_patient, overall = run_probe()
    print(f"ridge probe, 3D protocol: mean PCC {overall:.4f}")
    for patient, entry in per_patient.items():
        print(f"  {patient}: {entry['pcc']:.4f} over {entry['genes_scored']} genes")

    record = {
        "probe": "ridge regression on mean-color features of 32px and 64px center crops",
        "protocol": "per patient: fit on layer 0, score PCC on layers >= 1, average patients",
        "generator_params": GENERATOR_PARAMS,
        "ridge_lambda": RIDGE_LAMBDA,
        "per_patient": per_patient,
        "probe_mean_pcc": round(overall, 6),
        "threshold": THRESHOLD,
        "note": "threshold fixed from this probe run before model development; "
        "a trained network must reach mean held-out-layer PCC >= threshold",
    }
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2)
        fh.write("\n")
    print(f"wrote {out_path} (threshold {THRESHOLD})")


if __name__ == "__main__":
    main()
