"""Model and training configuration.

All hyperparameters live in two dataclasses with published defaults.
Configs can be loaded from a TOML file with ``[model]`` / ``[train]``
tables (unknown keys are rejected) and overridden field-by-field.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from typing import Any

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

LEVEL_CHOICES = (1, 2, 4, 7)
FUSION_MODES = ("attention", "additive")
QK_MODES = ("none", "ccf", "input")
ALIGN_REDUCTIONS = ("mean", "sum")


@dataclass
class EncoderConfig:
    """Residual backbone layout.

    ``depth`` 18 means four stages of two residual blocks, 10 means four
    stages of one block.  Stage widths are ``base_width * (1, 2, 4, 8)``,
    so the output channel count is ``base_width * 8``.  Every stride-2
    element halves the spatial size with ceiling rounding, so the output
    grid is a pure function of the input size and the stride schedule.
    """

    depth: int = 18
    base_width: int = 64
    stem_stride: int = 2
    stem_pool: bool = True
    stage_strides: tuple[int, ...] = (1, 2, 2, 2)

    @property
    def blocks_per_stage(self) -> int:
        return {10: 1, 18: 2}[self.depth]

    @property
    def out_channels(self) -> int:
        return self.base_width * 8

    @property
    def total_stride(self) -> int:
        stride = self.stem_stride * (2 if self.stem_pool else 1)
        for s in self.stage_strides:
            stride *= s
        return stride

    def validate(self) -> None:
        if self.depth not in (10, 18):
            raise ValueError(f"encoder depth must be 10 or 18, got {self.depth}")
        if self.base_width < 1:
            raise ValueError("base_width must be positive")
        if self.stem_stride not in (1, 2):
            raise ValueError("stem_stride must be 1 or 2")
        if len(self.stage_strides) != 4 or any(s not in (1, 2) for s in self.stage_strides):
            raise ValueError("stage_strides must be four entries of 1 or 2")


@dataclass
class ModelConfig:
    """Architecture hyperparameters with published defaults."""

    spot_size: int = 224
    neighbor_size: int = 448
    levels: list[int] = field(default_factory=lambda: [1, 2, 7])
    n_genes: int = 250
    heads: int = 4
    k: int = 2
    fusion: str = "attention"
    region_branch: bool = True
    qk_reversed: str = "none"
    align_reduction: str = "mean"
    layernorm_eps: float = 1e-5
    spot_encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(depth=18))
    region_encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(depth=10))

    @property
    def d(self) -> int:
        return self.spot_encoder.out_channels

    def validate(self) -> None:
        self.spot_encoder.validate()
        self.region_encoder.validate()
        if self.spot_size <= 0 or self.spot_size % 2:
            raise ValueError("spot_size must be a positive even integer")
        if self.neighbor_size <= 0 or self.neighbor_size % 2:
            raise ValueError("neighbor_size must be a positive even integer")
        validate_levels(self.levels, self.spot_size)
        if self.qk_reversed == "input":
            # the decomposition runs on the neighbor image instead
            validate_levels(self.levels, self.neighbor_size)
        if self.qk_reversed != "none" and not self.region_branch:
            raise ValueError("qk_reversed variants require the region branch")
        if self.n_genes < 1:
            raise ValueError("n_genes must be positive")
        if self.heads < 1 or self.d % self.heads:
            raise ValueError(f"heads ({self.heads}) must divide feature width ({self.d})")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if self.qk_reversed not in QK_MODES:
            raise ValueError(f"qk_reversed must be one of {QK_MODES}, got {self.qk_reversed!r}")
        if self.align_reduction not in ALIGN_REDUCTIONS:
            raise ValueError(f"align_reduction must be one of {ALIGN_REDUCTIONS}")

    @classmethod
    def desk(cls, n_genes: int = 8) -> "ModelConfig":
        """CPU-sized preset: a 1/4-scale geometric model of the defaults.

        spot 56 at total stride 8 mirrors spot 224 at stride 32, so every
        feature-grid shape (7x7 level maps, 14x14 region map) is preserved
        while channel widths shrink 8x.
        """
        small = dict(stem_stride=2, stem_pool=False, stage_strides=(1, 2, 2, 1))
        return cls(
            spot_size=56,
            neighbor_size=112,
            n_genes=n_genes,
            spot_encoder=EncoderConfig(depth=18, base_width=8, **small),
            region_encoder=EncoderConfig(depth=10, base_width=8, **small),
        )


def validate_levels(levels: list[int], spot_size: int) -> None:
    if not levels:
        raise ValueError("levels must not be empty")
    if 1 not in levels:
        raise ValueError("level 1 (the whole spot) is mandatory")
    if len(set(levels)) != len(levels):
        raise ValueError(f"duplicate levels in {levels}")
    if sorted(levels) != list(levels):
        raise ValueError(f"levels must be ascending, got {levels}")
    for g in levels:
        if g not in LEVEL_CHOICES:
            raise ValueError(f"level {g} not in supported set {LEVEL_CHOICES}")
        if spot_size % g:
            raise ValueError(f"level {g} does not divide spot_size {spot_size}")


@dataclass
class TrainConfig:
    """Optimization schedule with published defaults."""

    epochs: int = 50
    batch_size: int = 32
    lr_init: float = 3e-4
    lr_min: float = 1e-6
    schedule: str = "cosine"
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_align: float = 1.0
    val_fraction: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr_init <= 0 or self.lr_min <= 0:
            raise ValueError("learning rates must be positive")
        if self.lr_min >= self.lr_init:
            raise ValueError("lr_min must be below lr_init")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.weight_decay < 0 or self.lambda_align < 0:
            raise ValueError("weight_decay and lambda_align must be non-negative")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in [0, 1)")


def _coerce(value: Any, type_name: str) -> Any:
    # field.type is a string under `from __future__ import annotations`
    if type_name == "float" and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def _dataclass_from_dict(cls, data: dict, where: str):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ValueError(f"unknown config key(s) in {where}: {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key in ("spot_encoder", "region_encoder"):
            if not isinstance(value, dict):
                raise ValueError(f"{where}.{key} must be a table")
            kwargs[key] = _dataclass_from_dict(EncoderConfig, value, f"{where}.{key}")
        elif key == "stage_strides":
            kwargs[key] = tuple(value)
        elif key == "levels":
            kwargs[key] = list(value)
        else:
            kwargs[key] = _coerce(value, str(known[key].type))
    return cls(**kwargs)


def configs_from_dict(data: dict) -> tuple[ModelConfig, TrainConfig]:
    """Build validated configs from a parsed TOML document."""
    unknown = sorted(set(data) - {"model", "train"})
    if unknown:
        raise ValueError(f"unknown top-level config table(s): {', '.join(unknown)}")
    model = _dataclass_from_dict(ModelConfig, data.get("model", {}), "model")
    train = _dataclass_from_dict(TrainConfig, data.get("train", {}), "train")
    model.validate()
    train.validate()
    return model, train


def load_config(path) -> tuple[ModelConfig, TrainConfig]:
    """Read a TOML config file; unknown keys raise ValueError."""
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    return configs_from_dict(data)


def config_to_dict(model: ModelConfig, train: TrainConfig) -> dict:
    """Serializable snapshot of both configs (inverse of configs_from_dict)."""
    model_d = dataclasses.asdict(model)
    for enc in ("spot_encoder", "region_encoder"):
        model_d[enc]["stage_strides"] = list(model_d[enc]["stage_strides"])
    return {"model": model_d, "train": dataclasses.asdict(train)}
