"""Comparison head: cross subtraction, progressive fusion and the MLP scorer."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import ops
from .backbone import FeaturePyramid
from .nn import Conv2d, Linear, Module, ModuleList
from .tensor import Tensor


class DiffPyramid(NamedTuple):
    diffa: tuple[Tensor, ...]
    diffb: tuple[Tensor, ...]
    diffs: tuple[Tensor, ...]
    strides: tuple[int, ...]


class FusionState(NamedTuple):
    fused: tuple[Tensor, ...]  # F'^1 .. F'^4
    weights: tuple[Tensor, ...]  # w_2 .. w_4, already upsampled


class CrossSubtract(Module):
    """Per level: one 3x3 conv applied to both (ref - A) and (ref - B), then concat.

    The conv is shared between the A and B branches, so swapping A and B
    swaps the two channel halves of every concatenated map.
    """

    def __init__(self, widths, rng: np.random.Generator):
        super().__init__()
        self.convs = ModuleList(Conv2d(c, c, 3, rng, pad=1, bias=True) for c in widths)

    def forward(self, f_ref: FeaturePyramid, f_a: FeaturePyramid, f_b: FeaturePyramid) -> DiffPyramid:
        if not (len(f_ref) == len(f_a) == len(f_b) == len(self.convs)):
            raise ValueError("pyramids must all have one level per cross-subtraction conv")
        da, db, ds = [], [], []
        for conv, r, a, b in zip(self.convs, f_ref.levels, f_a.levels, f_b.levels):
            if not (r.shape == a.shape == b.shape):
                raise ValueError(f"pyramid level shapes differ: {r.shape}, {a.shape}, {b.shape}")
            xa = conv(ops.sub(r, a))
            xb = conv(ops.sub(r, b))
            da.append(xa)
            db.append(xb)
            ds.append(ops.concat_channels(xa, xb))
        return DiffPyramid(tuple(da), tuple(db), tuple(ds), f_ref.strides)


def fusion_weight(f: Tensor, conv: Conv2d) -> Tensor:
    """conv -> channel mean -> sigmoid -> 2x nearest upsample; N x 1 x 2H x 2W.

    The channel mean of a conv output equals a single-output conv whose
    kernel and bias are the means over output channels, so that form is
    evaluated instead; it costs 1/C of the full conv and differentiates to
    the same parameter gradients.
    """
    w = ops.mean_axis0(conv.weight)
    b = ops.mean_axis0(conv.bias) if conv.bias is not None else None
    pre = ops.conv2d(f, w, b, conv.stride, conv.pad)
    return ops.upsample2x_nearest(ops.sigmoid(pre))


def fusion_weight_reference(f: Tensor, conv: Conv2d) -> Tensor:
    """The literal op chain: full conv, then channel mean."""
    return ops.upsample2x_nearest(ops.sigmoid(ops.channel_mean(conv(f))))


class ProgressiveFusion(Module):
    """Fuse the difference pyramid from the deepest level upward.

    With ``cascaded=True`` each weight map is computed from the already-fused
    deeper map, so the deepest level modulates every shallower one. With
    ``cascaded=False`` each weight map comes from the raw deeper difference.
    """

    def __init__(self, widths, rng: np.random.Generator, cascaded: bool = True):
        super().__init__()
        self.cascaded = cascaded
        # one conv for each source level 2..4, operating on 2*C channels
        self.convs = ModuleList(Conv2d(2 * c, 2 * c, 3, rng, pad=1, bias=True) for c in widths[1:])

    def forward(self, d: DiffPyramid) -> tuple[Tensor, FusionState]:
        if len(d.diffs) != len(self.convs) + 1:
            raise ValueError(f"expected {len(self.convs) + 1} difference levels, got {len(d.diffs)}")
        top = len(d.diffs) - 1
        fused = [None] * len(d.diffs)
        weights = [None] * len(self.convs)
        fused[top] = d.diffs[top]
        for i in range(top - 1, -1, -1):
            src = fused[i + 1] if self.cascaded else d.diffs[i + 1]
            w = fusion_weight(src, self.convs[i])
            weights[i] = w
            fused[i] = ops.mul(d.diffs[i], w)
        return fused[0], FusionState(tuple(fused), tuple(weights))


class MLPHead(Module):
    """Global average pool, one hidden ReLU layer, scalar logit."""

    def __init__(self, channels: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = Linear(channels, hidden, rng)
        self.fc2 = Linear(hidden, 1, rng)

    def forward(self, f: Tensor) -> Tensor:
        h = ops.relu(self.fc1(ops.global_avg_pool(f)))
        return ops.reshape(self.fc2(h), (f.shape[0],))


class PRFHead(Module):
    def __init__(self, widths, hidden: int, rng: np.random.Generator, cascaded: bool = True):
        super().__init__()
        self.cross = CrossSubtract(widths, rng)
        self.fusion = ProgressiveFusion(widths, rng, cascaded=cascaded)
        self.mlp = MLPHead(2 * widths[0], hidden, rng)

    def forward(self, f_ref, f_a, f_b) -> Tensor:
        return self.forward_detailed(f_ref, f_a, f_b)[0]

    def forward_detailed(self, f_ref, f_a, f_b) -> tuple[Tensor, DiffPyramid, FusionState]:
        """Logits together with the difference pyramid and fusion state."""
        diffs = self.cross(f_ref, f_a, f_b)
        fused, state = self.fusion(diffs)
        return self.mlp(fused), diffs, state
