"""Residual convolutional backbones for spot and region features.

"depth-18" means a stride-2 stem (plus optional pool) followed by 4 stages
of 2 basic residual blocks; "depth-10" uses 1 block per stage.  The feature
map handed downstream is the final stage output before any global pooling,
shaped (batch, 8 * base_width, h, w).  Every stride-2 element (stem conv,
pool, first block of a stage) maps a side length S to ceil(S / 2), so the
output size is a pure function of the input size and the stage schedule.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .config import EncoderConfig


def feature_map_size(config: EncoderConfig, input_size: int) -> int:
    strides = [config.stem_stride]
    if config.stem_pool:
        strides.append(2)
    strides.extend(config.stage_strides)
    size = input_size
    for s in strides:
        size = math.ceil(size / s)
    if size < 1:
        raise ValueError(f"input size {input_size} collapses below 1x1 under {config}")
    return size


class BasicBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


class ResidualEncoder(nn.Module):
    """Backbone per EncoderConfig; forward returns the pre-pool feature map."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        config.validate()
        self.config = config
        w = config.base_width

        stem = [
            nn.Conv2d(3, w, 7, stride=config.stem_stride, padding=3, bias=False),
            nn.BatchNorm2d(w),
            nn.ReLU(inplace=True),
        ]
        if config.stem_pool:
            stem.append(nn.MaxPool2d(3, stride=2, padding=1))
        self.stem = nn.Sequential(*stem)

        stages = []
        in_ch = w
        for stage_idx, stride in enumerate(config.stage_strides):
            out_ch = w * (2**stage_idx)
            blocks = []
            for block_idx in range(config.blocks_per_stage):
                blocks.append(BasicBlock(in_ch, out_ch, stride if block_idx == 0 else 1))
                in_ch = out_ch
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.Sequential(*stages)

        for module in self.modules():
            if isinstance(module, nn.Conv2d):
                nn.init.kaiming_normal_(module.weight, mode="fan_out", nonlinearity="relu")
            elif isinstance(module, nn.BatchNorm2d):
                nn.init.ones_(module.weight)
                nn.init.zeros_(module.bias)

    @property
    def out_channels(self) -> int:
        return self.config.out_channels

    def _check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 4:
            raise ValueError(f"expected (batch, 3, S, S) input, got shape {tuple(x.shape)}")
        if x.shape[1] != 3:
            raise ValueError(f"expected 3 input channels, got {x.shape[1]}")
        if x.shape[2] != x.shape[3]:
            raise ValueError(f"expected square input, got {x.shape[2]}x{x.shape[3]}")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self._check_input(x)
        return self.stages(self.stem(x))


class RegionEncoder(nn.Module):
    """Lightweight context backbone; projects channels to d when widths differ."""

    def __init__(self, config: EncoderConfig, d: int):
        super().__init__()
        self.backbone = ResidualEncoder(config)
        if config.out_channels != d:
            self.project = nn.Conv2d(config.out_channels, d, 1, bias=False)
            nn.init.kaiming_normal_(self.project.weight, mode="fan_out", nonlinearity="relu")
        else:
            self.project = nn.Identity()
        self.out_channels = d

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.project(self.backbone(x))
