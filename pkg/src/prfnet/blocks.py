"""Residual building blocks: ResNet bottleneck, Res2Net, SE and SE-Res2Net."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .nn import BatchNorm2d, Conv2d, Linear, Module, ModuleList
from .tensor import Tensor

BLOCK_TYPES = ("bottleneck", "res2net", "se_res2net")


@dataclass(frozen=True)
class BlockConfig:
    in_channels: int
    mid_channels: int
    out_channels: int
    stride: int = 1
    res2net_scale: int = 4
    se_reduction: int = 4

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.res2net_scale < 2:
            raise ValueError("res2net_scale must be at least 2")
        if self.mid_channels % self.res2net_scale:
            raise ValueError(
                f"mid_channels={self.mid_channels} is not divisible by res2net_scale={self.res2net_scale}"
            )
        if self.se_reduction < 1 or self.out_channels < self.se_reduction:
            raise ValueError(
                f"se_reduction={self.se_reduction} must be in [1, out_channels={self.out_channels}]"
            )

    @property
    def needs_projection(self) -> bool:
        return self.stride != 1 or self.in_channels != self.out_channels

    @property
    def group_width(self) -> int:
        return self.mid_channels // self.res2net_scale


class Shortcut(Module):
    """Identity, or a strided 1x1 conv + BN projection when the shape changes."""

    def __init__(self, cfg: BlockConfig, rng: np.random.Generator):
        super().__init__()
        if cfg.needs_projection:
            self.conv = Conv2d(cfg.in_channels, cfg.out_channels, 1, rng, stride=cfg.stride)
            self.bn = BatchNorm2d(cfg.out_channels)
        else:
            self.conv = None
            self.bn = None

    def forward(self, x: Tensor) -> Tensor:
        if self.conv is None:
            return x
        return self.bn(self.conv(x))


class Bottleneck(Module):
    """1x1 reduce, 3x3 (strided), 1x1 expand, each followed by BN."""

    def __init__(self, cfg: BlockConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.conv1 = Conv2d(cfg.in_channels, cfg.mid_channels, 1, rng)
        self.bn1 = BatchNorm2d(cfg.mid_channels)
        self.conv2 = Conv2d(cfg.mid_channels, cfg.mid_channels, 3, rng, stride=cfg.stride, pad=1)
        self.bn2 = BatchNorm2d(cfg.mid_channels)
        self.conv3 = Conv2d(cfg.mid_channels, cfg.out_channels, 1, rng)
        self.bn3 = BatchNorm2d(cfg.out_channels)
        self.shortcut = Shortcut(cfg, rng)

    def residual(self, x: Tensor) -> Tensor:
        out = ops.relu(self.bn1(self.conv1(x)))
        out = ops.relu(self.bn2(self.conv2(out)))
        return self.bn3(self.conv3(out))

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.cfg)
        return ops.relu(ops.add(self.residual(x), self.shortcut(x)))


class SEBlock(Module):
    """Squeeze-and-excitation: per-channel gates from globally pooled features."""

    def __init__(self, channels: int, reduction: int, rng: np.random.Generator):
        super().__init__()
        if channels < reduction:
            raise ValueError(f"SE block needs channels ({channels}) >= reduction ({reduction})")
        hidden = channels // reduction
        self.fc1 = Linear(channels, hidden, rng)
        self.fc2 = Linear(hidden, channels, rng)

    def excitation(self, x: Tensor) -> Tensor:
        s = ops.global_avg_pool(x)
        return ops.sigmoid(self.fc2(ops.relu(self.fc1(s))))

    def forward(self, x: Tensor) -> Tensor:
        return ops.scale_channels(x, self.excitation(x))


class Res2NetBlock(Module):
    """Bottleneck whose 3x3 conv is replaced by hierarchical group convs.

    The mid features are split into ``s`` groups. The first group passes
    through; group ``i >= 2`` is convolved after adding the previous group's
    output, so later groups see a progressively larger receptive field.
    Strided blocks cannot chain (the previous output is already downsampled),
    so every group is convolved on its own and the pass-through group is
    average pooled to the new resolution.
    """

    use_se = False

    def __init__(self, cfg: BlockConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        s, width = cfg.res2net_scale, cfg.group_width
        self.conv1 = Conv2d(cfg.in_channels, cfg.mid_channels, 1, rng)
        self.bn1 = BatchNorm2d(cfg.mid_channels)
        self.convs = ModuleList(Conv2d(width, width, 3, rng, stride=cfg.stride, pad=1) for _ in range(s - 1))
        self.bns = ModuleList(BatchNorm2d(width) for _ in range(s - 1))
        self.conv3 = Conv2d(cfg.mid_channels, cfg.out_channels, 1, rng)
        self.bn3 = BatchNorm2d(cfg.out_channels)
        self.se = SEBlock(cfg.out_channels, cfg.se_reduction, rng) if self.use_se else None
        self.shortcut = Shortcut(cfg, rng)

    def groups(self, x: Tensor) -> list[Tensor]:
        """Outputs y_1..y_s of the hierarchical group stage."""
        xs = ops.split_channels(ops.relu(self.bn1(self.conv1(x))), self.cfg.res2net_scale)
        chained = self.cfg.stride == 1
        ys = [xs[0] if chained else ops.avg_pool2d(xs[0], 3, self.cfg.stride, pad=1)]
        for conv, bn, xi in zip(self.convs, self.bns, xs[1:]):
            inp = ops.add(xi, ys[-1]) if chained else xi
            ys.append(ops.relu(bn(conv(inp))))
        return ys

    def residual(self, x: Tensor) -> Tensor:
        out = self.bn3(self.conv3(ops.concat_channels(self.groups(x))))
        if self.se is not None:
            out = self.se(out)
        return out

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.cfg)
        return ops.relu(ops.add(self.residual(x), self.shortcut(x)))


class SERes2NetBlock(Res2NetBlock):
    """Res2Net block with squeeze-and-excitation on the residual branch."""

    use_se = True


def make_block(kind: str, cfg: BlockConfig, rng: np.random.Generator) -> Module:
    classes = {"bottleneck": Bottleneck, "res2net": Res2NetBlock, "se_res2net": SERes2NetBlock}
    try:
        return classes[kind](cfg, rng)
    except KeyError:
        raise ValueError(f"unknown block type {kind!r}; expected one of {BLOCK_TYPES}") from None


def _check_channels(x: Tensor, cfg: BlockConfig) -> None:
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ValueError(f"block expects {cfg.in_channels} input channels, got shape {x.shape}")

