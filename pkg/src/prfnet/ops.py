"""Differentiable tensor ops.

Each public op computes its forward result with numpy and hands a backward
rule to :func:`prfnet.tensor.apply_op`. Backward rules are module-level
functions named ``_<op>_bwd`` and are looked up when the op runs, so a test
can swap one out to check that gradient checking catches it.

Binary elementwise ops support exactly one broadcast: an operand with a
single channel (axis 1) against one with many.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import Tensor, apply_op

__all__ = [
    "conv2d",
    "batchnorm2d",
    "relu",
    "sigmoid",
    "add",
    "sub",
    "mul",
    "scale",
    "elementwise",
    "channel_mean",
    "global_avg_pool",
    "avg_pool2d",
    "upsample2x_nearest",
    "concat_channels",
    "slice_channels",
    "split_channels",
    "concat_batch",
    "slice_batch",
    "scale_channels",
    "linear",
    "mean_axis0",
    "reshape",
    "sum",
    "mean",
]


# --------------------------------------------------------------------------- #
# Convolution
# --------------------------------------------------------------------------- #
def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    view = as_strided(xp, (n, c, kh, kw, ho, wo), (sn, sc, sh, sw, sh * stride, sw * stride), writeable=False)
    return view.reshape(n, c * kh * kw, ho * wo)


def _cols(xd: np.ndarray, kh: int, kw: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    n, c, h, w = xd.shape
    if kh == kw == 1 and stride == 1 and pad == 0:
        return xd.reshape(n, c, h * w)
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    return _im2col(xp, kh, kw, stride, ho, wo)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding, NCHW layout."""
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise ValueError(f"conv2d channel mismatch: input has {cin}, weight expects {wcin}")
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{wd + 2 * pad}")
    if b is not None and b.shape != (cout,):
        raise ValueError(f"bias shape {b.shape} does not match {cout} output channels")
    ho, wo = _conv_out(h, kh, stride, pad), _conv_out(wd, kw, stride, pad)

    cols = _cols(x.data, kh, kw, stride, pad, ho, wo)
    w2 = w.data.reshape(cout, -1)
    out = np.matmul(w2, cols)
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(n, cout, ho, wo)
    ctx = (cols, w.data, x.shape, stride, pad, ho, wo, b is not None, x.requires_grad)
    inputs = (x, w) if b is None else (x, w, b)
    return apply_op(out, inputs, _conv2d_bwd, ctx)


def _conv2d_bwd(ctx, g):
    cols, wd_, xshape, stride, pad, ho, wo, has_bias, need_dx = ctx
    n, cin, h, wd = xshape
    cout, _, kh, kw = wd_.shape
    g2 = g.reshape(n, cout, ho * wo)
    if ho * wo >= 256:
        dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(wd_.shape)
    else:
        dw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(wd_.shape)
    dx = _conv2d_input_grad(g, wd_, xshape, stride, pad) if need_dx else None
    if has_bias:
        return dx, dw, g2.sum(axis=(0, 2))
    return dx, dw


def _conv2d_input_grad(g: np.ndarray, w: np.ndarray, xshape, stride: int, pad: int) -> np.ndarray:
    n, cin, h, wd = xshape
    cout, _, kh, kw = w.shape
    ho, wo = g.shape[2:]
    if kh == kw == 1 and stride == 1 and pad == 0:
        return np.matmul(np.ascontiguousarray(w.reshape(cout, cin).T), g.reshape(n, cout, h * wd)).reshape(xshape)
    if stride == 1 and pad <= kh - 1 and pad <= kw - 1 and kh == kw:
        # full correlation of the output gradient with the flipped, transposed kernel
        q = kh - 1 - pad
        wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)).reshape(cin, -1)
        return np.matmul(wt, _cols(g, kh, kw, 1, q, h, wd)).reshape(xshape)
    dcols = np.matmul(np.ascontiguousarray(w.reshape(cout, -1).T), g.reshape(n, cout, ho * wo))
    dxp = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad), dtype=g.dtype)
    dc = dcols.reshape(n, cin, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dc[:, :, i, j]
    return dxp[:, :, pad : pad + h, pad : pad + wd] if pad else dxp


# --------------------------------------------------------------------------- #
# Batch normalisation
# --------------------------------------------------------------------------- #
def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray | None,
    running_var: np.ndarray | None,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation.

    In training mode the batch statistics normalise ``x`` and the running
    buffers are updated in place (unbiased variance, as is conventional).
    In eval mode the running buffers are used and left untouched.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm parameters must have shape ({c},)")
    xd = x.data
    if training:
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mu = np.einsum("nchw->c", xd) / m
        xhat = xd - mu[None, :, None, None]
        var = np.einsum("nchw,nchw->c", xhat, xhat) / m
        if running_mean is not None:
            running_mean *= 1 - momentum
            running_mean += momentum * mu
            running_var *= 1 - momentum
            running_var += momentum * var * (m / max(m - 1, 1))
    else:
        if running_mean is None or running_var is None:
            raise ValueError("batchnorm in eval mode needs initialised running statistics")
        xhat = xd - running_mean.astype(xd.dtype)[None, :, None, None]
        var = running_var.astype(xd.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat *= inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None]
    out += beta.data[None, :, None, None]
    return apply_op(out, (x, gamma, beta), _batchnorm2d_bwd, (xhat, inv, gamma.data, training))


def _batchnorm2d_bwd(ctx, g):
    xhat, inv, gamma, training = ctx
    dgamma = np.einsum("nchw,nchw->c", g, xhat)
    dbeta = np.einsum("nchw->c", g)
    k = (gamma * inv)[None, :, None, None]
    if training:
        m = g.shape[0] * g.shape[2] * g.shape[3]
        dx = xhat * (-dgamma / m)[None, :, None, None]
        dx += g
        dx -= (dbeta / m)[None, :, None, None]
        dx *= k
    else:
        dx = g * k
    return dx, dgamma, dbeta


# --------------------------------------------------------------------------- #
# Elementwise
# --------------------------------------------------------------------------- #
# ReLU activation patterns are appended here while a recorder list is
# installed; gradient checks use them to spot finite-difference stencils
# that straddle a kink.
_relu_recorders: list[list[np.ndarray]] = []


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _relu_recorders:
        _relu_recorders[-1].append(mask)
    return apply_op(np.maximum(x.data, 0), (x,), _relu_bwd, mask)


def _relu_bwd(mask, g):
    return (g * mask,)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype, copy=False)
    return apply_op(out, (x,), _sigmoid_bwd, out)


def _sigmoid_bwd(out, g):
    return (g * out * (1.0 - out),)


def _check_binary(a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    ok = (
        a.ndim == b.ndim
        and a.ndim >= 2
        and all(x == y for i, (x, y) in enumerate(zip(a.shape, b.shape)) if i != 1)
        and 1 in (a.shape[1], b.shape[1])
    )
    if not ok:
        raise ValueError(f"incompatible shapes {a.shape} and {b.shape}: only channel broadcast is supported")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=1, keepdims=True)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b)
    return apply_op(a.data + b.data, (a, b), _add_bwd, (a.shape, b.shape))


def _add_bwd(ctx, g):
    sa, sb = ctx
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b)
    return apply_op(a.data - b.data, (a, b), _sub_bwd, (a.shape, b.shape))


def _sub_bwd(ctx, g):
    sa, sb = ctx
    return _unbroadcast(g, sa), -_unbroadcast(g, sb)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product, with a single-channel operand broadcast over channels."""
    _check_binary(a, b)
    return apply_op(a.data * b.data, (a, b), _mul_bwd, (a.data, b.data))


def _mul_bwd(ctx, g):
    ad, bd = ctx
    return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)


def scale(x: Tensor, c: float) -> Tensor:
    return apply_op(x.data * x.data.dtype.type(c), (x,), _scale_bwd, c)


def _scale_bwd(c, g):
    return (g * g.dtype.type(c),)


def elementwise(a: Tensor, b: Tensor | None = None, kind: str = "relu") -> Tensor:
    """Dispatch by name: ``relu``, ``sigmoid``, ``add``, ``sub`` or ``hadamard``."""
    unary = {"relu": relu, "sigmoid": sigmoid}
    binary = {"add": add, "sub": sub, "hadamard": mul}
    if kind in unary:
        return unary[kind](a)
    if kind in binary:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return binary[kind](a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# --------------------------------------------------------------------------- #
# Pooling and resampling
# --------------------------------------------------------------------------- #
def channel_mean(x: Tensor) -> Tensor:
    """Mean over the channel axis: N x C x H x W -> N x 1 x H x W."""
    return apply_op(x.data.mean(axis=1, keepdims=True), (x,), _channel_mean_bwd, x.shape)


def _channel_mean_bwd(shape, g):
    return (np.broadcast_to(g / shape[1], shape).copy(),)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: N x C x H x W -> N x C."""
    return apply_op(x.data.mean(axis=(2, 3)), (x,), _global_avg_pool_bwd, x.shape)


def _global_avg_pool_bwd(shape, g):
    n, c, h, w = shape
    return (np.broadcast_to((g / (h * w))[:, :, None, None], shape).copy(),)


def avg_pool2d(x: Tensor, k: int, stride: int, pad: int = 0) -> Tensor:
    """Average pooling; zero padding counts toward the divisor."""
    n, c, h, w = x.shape
    ho, wo = _conv_out(h, k, stride, pad), _conv_out(w, k, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            out += xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    out /= k * k
    return apply_op(out, (x,), _avg_pool2d_bwd, (x.shape, k, stride, pad, ho, wo))


def _avg_pool2d_bwd(ctx, g):
    (n, c, h, w), k, stride, pad, ho, wo = ctx
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=g.dtype)
    gk = g / (k * k)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gk
    return (dxp[:, :, pad : pad + h, pad : pad + w],)


def upsample2x_nearest(x: Tensor) -> Tensor:
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return apply_op(out, (x,), _upsample2x_nearest_bwd, None)


def _upsample2x_nearest_bwd(_, g):
    n, c, h, w = g.shape
    return (g.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)),)


# --------------------------------------------------------------------------- #
# Structural
# --------------------------------------------------------------------------- #
def concat_channels(*parts: Tensor) -> Tensor:
    if len(parts) == 1 and isinstance(parts[0], (list, tuple)):
        parts = tuple(parts[0])
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != 4 or (p.shape[0], *p.shape[2:]) != (ref[0], *ref[2:]):
            raise ValueError(f"concat_channels: shape {p.shape} incompatible with {ref}")
    sizes = [p.shape[1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)
    return apply_op(out, parts, _concat_channels_bwd, sizes)


def _concat_channels_bwd(sizes, g):
    return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=1))


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    return apply_op(x.data[:, start:stop], (x,), _slice_channels_bwd, (x.shape, start, stop))


def _slice_channels_bwd(ctx, g):
    shape, start, stop = ctx
    dx = np.zeros(shape, dtype=g.dtype)
    dx[:, start:stop] = g
    return (dx,)


def split_channels(x: Tensor, groups: int) -> list[Tensor]:
    c = x.shape[1]
    if c % groups:
        raise ValueError(f"cannot split {c} channels into {groups} equal groups")
    width = c // groups
    return [slice_channels(x, i * width, (i + 1) * width) for i in range(groups)]


def concat_batch(parts: Sequence[Tensor]) -> Tensor:
    ref = parts[0].shape[1:]
    for p in parts[1:]:
        if p.shape[1:] != ref:
            raise ValueError(f"concat_batch: shape {p.shape} incompatible with {parts[0].shape}")
    sizes = [p.shape[0] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=0)
    return apply_op(out, tuple(parts), _concat_batch_bwd, sizes)


def _concat_batch_bwd(sizes, g):
    return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=0))


def slice_batch(x: Tensor, start: int, stop: int) -> Tensor:
    return apply_op(x.data[start:stop], (x,), _slice_batch_bwd, (x.shape, start, stop))


def _slice_batch_bwd(ctx, g):
    shape, start, stop = ctx
    dx = np.zeros(shape, dtype=g.dtype)
    dx[start:stop] = g
    return (dx,)


def scale_channels(x: Tensor, s: Tensor) -> Tensor:
    """Multiply each channel map of ``x`` (N x C x H x W) by ``s`` (N x C)."""
    if s.shape != x.shape[:2]:
        raise ValueError(f"channel scales {s.shape} do not match input {x.shape}")
    out = x.data * s.data[:, :, None, None]
    return apply_op(out, (x, s), _scale_channels_bwd, (x.data, s.data))


def _scale_channels_bwd(ctx, g):
    xd, sd = ctx
    return g * sd[:, :, None, None], np.einsum("nchw,nchw->nc", g, xd)


def mean_axis0(x: Tensor) -> Tensor:
    """Mean over the leading axis, keeping it with extent 1."""
    return apply_op(x.data.mean(axis=0, keepdims=True), (x,), _mean_axis0_bwd, x.shape)


def _mean_axis0_bwd(shape, g):
    return (np.broadcast_to(g / shape[0], shape).copy(),)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return apply_op(x.data.reshape(shape), (x,), _reshape_bwd, x.shape)


def _reshape_bwd(shape, g):
    return (g.reshape(shape),)


# --------------------------------------------------------------------------- #
# Dense
# --------------------------------------------------------------------------- #
def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map ``x @ w.T + b`` for x of shape N x D and w of shape Dout x D."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"linear: cannot apply weight {w.shape} to input {x.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ValueError(f"linear: bias {b.shape} does not match weight {w.shape}")
    # one product per row keeps each row's result independent of its batch position
    out = np.matmul(x.data[:, None, :], w.data.T)[:, 0]
    if b is not None:
        out = out + b.data
    inputs = (x, w) if b is None else (x, w, b)
    return apply_op(out, inputs, _linear_bwd, (x.data, w.data, b is not None))


def _linear_bwd(ctx, g):
    xd, wd, has_bias = ctx
    dx = g @ wd
    dw = g.T @ xd
    if has_bias:
        return dx, dw, g.sum(axis=0)
    return dx, dw


# --------------------------------------------------------------------------- #
# Reductions
# --------------------------------------------------------------------------- #
def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return apply_op(np.asarray(x.data.sum(), dtype=x.dtype), (x,), _sum_bwd, x.shape)


def _sum_bwd(shape, g):
    return (np.broadcast_to(g, shape).copy(),)


def mean(x: Tensor) -> Tensor:
    return apply_op(np.asarray(x.data.mean(), dtype=x.dtype), (x,), _mean_bwd, x.shape)


def _mean_bwd(shape, g):
    return (np.broadcast_to(g / np.prod(shape), shape).astype(g.dtype),)
