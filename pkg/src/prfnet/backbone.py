"""Shared feature extractor producing a four-level pyramid per image."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import ops
from .blocks import BLOCK_TYPES, BlockConfig, make_block
from .nn import BatchNorm2d, Conv2d, Module, ModuleList
from .tensor import Tensor

EXPANSION = 4  # block output channels / mid channels, as in ResNet50


@dataclass(frozen=True)
class BackboneConfig:
    stem_width: int = 8
    stage_widths: tuple[int, ...] = (32, 64, 128, 256)
    block_counts: tuple[int, ...] = (3, 4, 6, 3)
    # The stem already halves the resolution and there is no max-pool, so
    # stage 1 sits at stride 2 and stages 2-4 at 4, 8, 16.
    stage_strides: tuple[int, ...] = (1, 2, 2, 2)
    res2net_scale: int = 4
    se_reduction: int = 4
    block_type: str = "se_res2net"

    def __post_init__(self):
        for name in ("stage_widths", "block_counts", "stage_strides"):
            value = tuple(getattr(self, name))
            object.__setattr__(self, name, value)
            if len(value) != 4:
                raise ValueError(f"{name} needs 4 entries, got {value}")
        w = self.stage_widths
        if any(b != 2 * a for a, b in zip(w, w[1:])):
            raise ValueError(f"stage_widths must double per stage, got {w}")
        if any(c < 1 for c in self.block_counts):
            raise ValueError("every stage needs at least one block")
        if self.block_type not in BLOCK_TYPES:
            raise ValueError(f"unknown block_type {self.block_type!r}")
        if self.stem_width < 1:
            raise ValueError("stem_width must be positive")

    @classmethod
    def full(cls) -> "BackboneConfig":
        """ResNet50-width configuration."""
        return cls(stem_width=64, stage_widths=(256, 512, 1024, 2048), se_reduction=16)

    @property
    def total_stride(self) -> int:
        return 2 * int(np.prod(self.stage_strides))

    def level_strides(self) -> tuple[int, ...]:
        out, s = [], 2
        for st in self.stage_strides:
            s *= st
            out.append(s)
        return tuple(out)

    def block_configs(self) -> list[list[BlockConfig]]:
        stages, cin = [], self.stem_width
        for width, count, stride in zip(self.stage_widths, self.block_counts, self.stage_strides):
            blocks = []
            for i in range(count):
                blocks.append(
                    BlockConfig(
                        in_channels=cin,
                        mid_channels=width // EXPANSION,
                        out_channels=width,
                        stride=stride if i == 0 else 1,
                        res2net_scale=self.res2net_scale,
                        se_reduction=self.se_reduction,
                    )
                )
                cin = width
            stages.append(blocks)
        return stages


class FeaturePyramid(NamedTuple):
    levels: tuple[Tensor, ...]
    strides: tuple[int, ...]

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(t.shape[1] for t in self.levels)

    def __getitem__(self, i):
        return self.levels[i]

    def __len__(self):
        return len(self.levels)


class Backbone(Module):
    """7x7/2 stem followed by four stages of residual blocks."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.stem_conv = Conv2d(3, cfg.stem_width, 7, rng, stride=2, pad=3)
        self.stem_bn = BatchNorm2d(cfg.stem_width)
        self.stages = ModuleList()
        for blocks in cfg.block_configs():
            self.stages.append(ModuleList(make_block(cfg.block_type, b, rng) for b in blocks))

    def forward(self, x: Tensor) -> FeaturePyramid:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"backbone expects N x 3 x H x W images, got {x.shape}")
        s = self.cfg.total_stride
        if x.shape[2] % s or x.shape[3] % s:
            raise ValueError(f"image extents {x.shape[2:]} must be divisible by {s}")
        out = ops.relu(self.stem_bn(self.stem_conv(x)))
        levels = []
        for stage in self.stages:
            for block in stage:
                out = block(out)
            levels.append(out)
        return FeaturePyramid(tuple(levels), self.cfg.level_strides())


def extract_pyramid(image: Tensor, backbone: Backbone) -> FeaturePyramid:
    return backbone(image)


def extract_triplet(O: Tensor, A: Tensor, B: Tensor, backbone: Backbone):
    """Run one shared backbone over the triplet as a single batch of 3N images.

    A single batch means training-mode batch statistics are shared, so
    identical inputs give identical features regardless of their position.
    """
    if not (O.shape == A.shape == B.shape):
        raise ValueError(f"triplet shapes differ: {O.shape}, {A.shape}, {B.shape}")
    n = O.shape[0]
    pyr = backbone(ops.concat_batch([O, A, B]))
    parts = []
    for k in range(3):
        levels = tuple(ops.slice_batch(t, k * n, (k + 1) * n) for t in pyr.levels)
        parts.append(FeaturePyramid(levels, pyr.strides))
    return tuple(parts)
