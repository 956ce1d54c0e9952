"""Loss composition, cosine schedule, and the training loop.

The loop batches by seeded permutation and crops images lazily per batch,
so memory stays flat in the spot count.  Learning rate follows the closed
cosine form exactly (no framework scheduler), checkpoints are written per
epoch with the best-by-validation archive retained, and every step appends
one JSON line with the loss breakdown.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .config import ModelConfig, TrainConfig
from .dataset import SlideRecord, crop_neighbor, crop_spot
from .errors import NumericalError


@dataclass
class LossBreakdown:
    main: torch.Tensor
    aux: torch.Tensor
    align: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict:
        return {
            "main": float(self.main.detach()),
            "aux": float(self.aux.detach()),
            "align": float(self.align.detach()),
            "total": float(self.total.detach()),
        }


def main_loss(preds: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """(1/n) sum_i ||pred_i - target_i||^2 (squared norm over genes, mean over spots)."""
    if preds.shape != targets.shape:
        raise ValueError(f"shape mismatch: {tuple(preds.shape)} vs {tuple(targets.shape)}")
    return ((preds - targets) ** 2).sum(dim=1).mean()


def aux_loss(aux_preds: list[torch.Tensor], targets: torch.Tensor) -> torch.Tensor:
    """(1/(L*n)) sum over levels and spots of squared norms."""
    if not aux_preds:
        raise ValueError("need at least one auxiliary prediction")
    for pred in aux_preds:
        if pred.shape != targets.shape:
            raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(targets.shape)}")
    per_level = [((pred - targets) ** 2).sum(dim=1).mean() for pred in aux_preds]
    return torch.stack(per_level).mean()


def total_loss(
    preds: torch.Tensor,
    aux_preds: list[torch.Tensor],
    align: torch.Tensor,
    targets: torch.Tensor,
    lambda_align: float,
) -> LossBreakdown:
    main = main_loss(preds, targets)
    aux = aux_loss(aux_preds, targets)
    # compose in float64 so the logged total reproduces main + aux + lambda*align
    # exactly from the logged components
    total = main.double() + aux.double() + lambda_align * align.double()
    return LossBreakdown(main=main, aux=aux, align=align, total=total)


def cosine_lr(step: int, total_steps: int, lr_init: float, lr_min: float) -> float:
    """Closed-form cosine annealing over step indices 0 .. total_steps-1."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside schedule of {total_steps} steps")
    if total_steps == 1:
        return lr_init
    t = step / (total_steps - 1)
    return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + math.cos(math.pi * t))


def param_groups(model: torch.nn.Module, weight_decay: float) -> list[dict]:
    """Two Adam groups: weights with decay, norm/bias parameters without."""
    decay, no_decay = [], []
    decay_names, no_decay_names = [], []
    for name, param in model.named_parameters():
        if not param.requires_grad:
            continue
        if param.ndim <= 1:  # biases, norm scales/shifts, fusion alphas
            no_decay.append(param)
            no_decay_names.append(name)
        else:
            decay.append(param)
            decay_names.append(name)
    return [
        {"params": decay, "weight_decay": weight_decay, "names": decay_names},
        {"params": no_decay, "weight_decay": 0.0, "names": no_decay_names},
    ]


@dataclass
class SampleSet:
    """Spots ready for training/evaluation: slide refs plus target rows."""

    slides: list[SlideRecord]
    refs: list[tuple[int, int]]  # (slide index, spot index within slide)
    targets: np.ndarray  # len(refs) x m, normalized expression, float32
    gene_names: list[str]

    def __len__(self) -> int:
        return len(self.refs)

    def patient_of(self, i: int) -> str:
        return self.slides[self.refs[i][0]].patient_id

    def spot_id_of(self, i: int) -> str:
        slide_idx, spot_idx = self.refs[i]
        return self.slides[slide_idx].spots[spot_idx].spot_id

    def validate(self) -> None:
        if len(self.refs) != len(self.targets):
            raise ValueError("refs and targets disagree in length")
        if self.targets.shape[1] != len(self.gene_names):
            raise ValueError("target width does not match gene names")


def assemble_samples(slides: list[SlideRecord], normalized, include=None) -> SampleSet:
    """Build a SampleSet from slides and a normalized, gene-subset matrix.

    include: optional predicate over SlideRecord selecting which slides
    contribute spots (split membership); all slides stay addressable.
    """
    if normalized.space != "normalized":
        raise ValueError("assemble_samples expects normalized targets")
    row = normalized.row_index()
    refs, rows = [], []
    for slide_idx, slide in enumerate(slides):
        if include is not None and not include(slide):
            continue
        for spot_idx, spot in enumerate(slide.spots):
            refs.append((slide_idx, spot_idx))
            rows.append(row[spot.spot_id])
    targets = normalized.values[rows].astype(np.float32) if rows else np.zeros((0, len(normalized.gene_names)), dtype=np.float32)
    sample_set = SampleSet(slides, refs, targets, list(normalized.gene_names))
    sample_set.validate()
    return sample_set


def collate(
    sample_set: SampleSet,
    indices,
    spot_size: int,
    neighbor_size: int,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Crop and stack a batch: (B,3,S,S) spots, (B,3,N,N) neighbors, (B,m) targets."""
    spots, regions, targets = [], [], []
    for i in indices:
        slide_idx, spot_idx = sample_set.refs[i]
        slide = sample_set.slides[slide_idx]
        spot = slide.spots[spot_idx]
        spots.append(crop_spot(slide, spot, spot_size))
        regions.append(crop_neighbor(slide, spot, neighbor_size))
        targets.append(sample_set.targets[i])
    spot_t = torch.from_numpy(np.stack(spots)).permute(0, 3, 1, 2).contiguous()
    region_t = torch.from_numpy(np.stack(regions)).permute(0, 3, 1, 2).contiguous()
    target_t = torch.from_numpy(np.stack(targets))
    return spot_t, region_t, target_t


def split_validation(sample_set: SampleSet, val_fraction: float, seed: int):
    """Patient-stratified split of sample indices into (train, val)."""
    by_patient: dict[str, list[int]] = {}
    for i in range(len(sample_set)):
        by_patient.setdefault(sample_set.patient_of(i), []).append(i)
    rng = np.random.default_rng([seed, 0x5EED])
    train_idx, val_idx = [], []
    for patient in sorted(by_patient):
        idx = np.array(by_patient[patient])
        rng.shuffle(idx)
        n_val = int(round(val_fraction * len(idx)))
        val_idx.extend(idx[:n_val].tolist())
        train_idx.extend(idx[n_val:].tolist())
    return sorted(train_idx), sorted(val_idx)


def check_finite(breakdown: LossBreakdown, prediction: torch.Tensor) -> None:
    if not torch.isfinite(prediction).all():
        raise NumericalError("non-finite values in tensor 'prediction'")
    for name in ("main", "aux", "align", "total"):
        value = getattr(breakdown, name)
        if not torch.isfinite(value).all():
            raise NumericalError(f"non-finite values in tensor '{name}_loss'")


@dataclass
class TrainResult:
    checkpoint_paths: list[Path]
    best_path: Path
    log_path: Path
    history: list[dict]
    best_val_loss: float


def _evaluate_main_loss(model, sample_set, indices, model_config, batch_size) -> float:
    model.eval()
    losses, counts = [], []
    with torch.no_grad():
        for start in range(0, len(indices), batch_size):
            chunk = indices[start : start + batch_size]
            spot, region, target = collate(
                sample_set, chunk, model_config.spot_size, model_config.neighbor_size
            )
            out = model(spot, region)
            losses.append(float(main_loss(out.prediction, target)) * len(chunk))
            counts.append(len(chunk))
    model.train()
    return sum(losses) / sum(counts)


def train(
    model,
    sample_set: SampleSet,
    model_config: ModelConfig,
    train_config: TrainConfig,
    out_dir,
) -> TrainResult:
    """Full optimization run; writes epoch_{E}.ckpt, best.ckpt, metrics.jsonl."""
    if len(sample_set) == 0:
        raise ValueError("training split is empty")
    sample_set.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(train_config.seed)
    batch_rng = np.random.default_rng([train_config.seed, 0xBA7C4])

    train_idx, val_idx = split_validation(sample_set, train_config.val_fraction, train_config.seed)
    if not train_idx:
        raise ValueError("validation split consumed every spot; lower val_fraction")

    optimizer = torch.optim.Adam(
        param_groups(model, train_config.weight_decay),
        lr=train_config.lr_init,
        betas=(train_config.beta1, train_config.beta2),
        eps=train_config.adam_eps,
    )

    steps_per_epoch = math.ceil(len(train_idx) / train_config.batch_size)
    total_steps = train_config.epochs * steps_per_epoch
    log_path = out / "metrics.jsonl"
    history: list[dict] = []
    checkpoint_paths: list[Path] = []
    best_val = math.inf
    best_path = out / "best.ckpt"

    model.train()
    step = 0
    with open(log_path, "w", encoding="utf-8") as log:
        for epoch in range(train_config.epochs):
            order = batch_rng.permutation(len(train_idx))
            for start in range(0, len(order), train_config.batch_size):
                chunk = [train_idx[j] for j in order[start : start + train_config.batch_size]]
                spot, region, target = collate(
                    sample_set, chunk, model_config.spot_size, model_config.neighbor_size
                )
                if train_config.schedule == "cosine":
                    lr = cosine_lr(step, total_steps, train_config.lr_init, train_config.lr_min)
                else:
                    lr = train_config.lr_init
                for group in optimizer.param_groups:
                    group["lr"] = lr

                out_model = model(spot, region)
                breakdown = total_loss(
                    out_model.prediction,
                    out_model.aux_predictions,
                    out_model.align_loss,
                    target,
                    train_config.lambda_align,
                )
                check_finite(breakdown, out_model.prediction)

                optimizer.zero_grad()
                breakdown.total.backward()
                optimizer.step()

                record = {"step": step, "epoch": epoch, "lr": lr, **breakdown.as_floats()}
                log.write(json.dumps(record) + "\n")
                history.append(record)
                step += 1

            epoch_path = out / f"epoch_{epoch}.ckpt"
            save_checkpoint(epoch_path, model, train_config, sample_set.gene_names, train_config.seed)
            checkpoint_paths.append(epoch_path)

            score_idx = val_idx if val_idx else train_idx
            val_loss = _evaluate_main_loss(
                model, sample_set, score_idx, model_config, train_config.batch_size
            )
            if val_loss < best_val:
                best_val = val_loss
                save_checkpoint(best_path, model, train_config, sample_set.gene_names, train_config.seed)

    model.eval()
    return TrainResult(
        checkpoint_paths=checkpoint_paths,
        best_path=best_path,
        log_path=log_path,
        history=history,
        best_val_loss=best_val,
    )


def overfit_single_batch(model, batch, lambda_align: float, steps: int = 100, lr: float = 3e-4):
    """Repeated Adam steps on one fixed batch; returns the total-loss series."""
    spot, region, target = batch
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    losses = []
    model.train()
    for _ in range(steps):
        out = model(spot, region)
        breakdown = total_loss(
            out.prediction, out.aux_predictions, out.align_loss, target, lambda_align
        )
        check_finite(breakdown, out.prediction)
        optimizer.zero_grad()
        breakdown.total.backward()
        optimizer.step()
        losses.append(float(breakdown.total.detach()))
    model.eval()
    return losses
