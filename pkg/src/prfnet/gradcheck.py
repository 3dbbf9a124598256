"""Finite-difference gradient checks for single ops, blocks and the whole model."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import ops
from .blocks import BlockConfig, SEBlock, make_block
from .head import PRFHead
from .backbone import FeaturePyramid
from .model import ModelConfig, PRFNet
from .nn import Module
from .tensor import Parameter, Tape, Tensor, apply_op, precision

TOLERANCE = 1e-5


def project(x: Tensor, r: np.ndarray) -> Tensor:
    """Scalar <x, r>; a random ``r`` makes every output element matter.

    The sum is exactly rounded, so elements a perturbation leaves untouched
    cancel exactly between the two sides of a central difference.
    """
    return apply_op(np.asarray(math.fsum((x.data * r).ravel())), (x,), _project_bwd, r)


def _project_bwd(r, g):
    return (g * r,)


def _sum_terms_bwd(n, g):
    return (g,) * n


def project_all(tensors: Sequence[Tensor], rng: np.random.Generator) -> Callable[[Sequence[Tensor]], Tensor]:
    """Fix one random direction per tensor; returns a function summing the projections.

    Each direction is scaled by 1 / ||t|| so every term starts near unit
    size; a single large map would otherwise set the rounding floor for all.
    """
    dirs = [rng.standard_normal(t.shape) / max(float(np.linalg.norm(t.data)), 1e-12) for t in tensors]

    def f(ts: Sequence[Tensor]) -> Tensor:
        terms = [project(t, r) for t, r in zip(ts, dirs)]
        value = math.fsum(t.item() for t in terms)
        return apply_op(np.asarray(value), terms, _sum_terms_bwd, len(terms))

    return f


def _evaluate(f: Callable[[], Tensor]) -> tuple[float, list[np.ndarray]]:
    masks: list[np.ndarray] = []
    ops._relu_recorders.append(masks)
    try:
        value = f().item()
    finally:
        ops._relu_recorders.pop()
    return value, masks


def _same_pattern(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    eps: float = 1e-6,
    samples_per_param: int = 3,
    rng: np.random.Generator | None = None,
    max_draws: int = 20,
    min_fraction: float = 0.1,
) -> float:
    """Max relative error between backprop and central differences.

    ``f`` recomputes a scalar from the current parameter values. Up to
    ``samples_per_param`` coordinates per parameter are compared, using
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-12). Frozen
    parameters are skipped.

    Coordinates are drawn from those whose analytic gradient is at least
    ``min_fraction`` of the largest in the same tensor. A derivative that is
    near zero only by cancellation sits below what a float64 central
    difference can resolve, and its relative error would measure rounding
    rather than the backward rule.

    A coordinate whose +-eps perturbation flips any ReLU is redrawn: the
    stencil then spans a kink and the central difference is not an estimate
    of the derivative. At most ``max_draws`` coordinates are tried per
    parameter.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"eps must be in [1e-7, 1e-4], got {eps}")
    params = [p for p in params if not p.frozen]
    if any(p.dtype != np.float64 for p in params):
        raise ValueError("gradient checks need float64 parameters; use precision('f64')")
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    _, base = _evaluate(f)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        want = samples_per_param
        mag = np.abs(analytic).reshape(-1)
        pool = np.flatnonzero(mag >= min_fraction * mag.max()) if mag.max() > 0 else np.arange(flat.size)
        order = rng.permutation(pool)[:max_draws]
        checked = 0
        for i in order:
            if checked == want:
                break
            orig = flat[i]
            flat[i] = orig + eps
            up, mask_up = _evaluate(f)
            flat[i] = orig - eps
            down, mask_down = _evaluate(f)
            flat[i] = orig
            if not (_same_pattern(base, mask_up) and _same_pattern(base, mask_down)):
                continue
            checked += 1
            numeric = (up - down) / (2 * eps)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-12))
        if checked == 0:
            # every draw straddled a kink; report failure rather than a vacuous pass
            worst = math.inf
    for p in params:
        p.grad = None
    return worst


def jitter(params: Sequence[Parameter], rng: np.random.Generator, scale: float = 0.1) -> None:
    """Move parameters off the initial point.

    Zero biases and unit batch-norm scales put ReLUs exactly on their kink
    (e.g. an SE gate fed a pooled batch-norm output that equals beta = 0),
    where finite differences and the subgradient legitimately disagree.
    """
    for p in params:
        p.data += scale * rng.standard_normal(p.shape)


@dataclass
class CheckRow:
    component: str
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _module_check(module: Module, x: np.ndarray, rng, eps: float, samples: int, forward=None) -> float:
    """Check a module in training mode; batch-norm buffers are restored afterwards."""
    saved = {n: b.copy() for n, b in module.named_buffers()}
    module.train()
    forward = forward or module
    jitter(module.parameters(), rng)
    xt = Tensor(x, requires_grad=True)
    out = forward(xt)
    r = rng.standard_normal(out.shape)
    try:
        return grad_check(lambda: project(forward(xt), r), [*module.parameters()], eps, samples, rng)
    finally:
        for n, b in module.named_buffers():
            np.copyto(b, saved[n])


def _block_rows(seed: int, eps: float, samples: int) -> list[tuple[str, Callable[[], float]]]:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 4, 8, 8))
    plain = BlockConfig(in_channels=4, mid_channels=4, out_channels=16)
    strided = BlockConfig(in_channels=4, mid_channels=4, out_channels=16, stride=2)
    rows = []
    for kind in ("bottleneck", "res2net", "se_res2net"):
        for tag, cfg in (("", plain), ("/stride2", strided)):
            block = make_block(kind, cfg, rng)
            rows.append((kind + tag, lambda b=block: _module_check(b, x, rng, eps, samples)))
    se = SEBlock(4, 4, rng)
    rows.append(("se", lambda: _module_check(se, x, rng, eps, samples)))
    return rows


def _head_check(seed: int, eps: float, samples: int, cascaded: bool) -> float:
    rng = np.random.default_rng(seed)
    widths = (4, 8, 16, 32)
    head = PRFHead(widths, 8, rng, cascaded=cascaded)
    jitter(head.parameters(), rng)
    pyr = []
    for _ in range(3):
        levels = tuple(Tensor(rng.standard_normal((2, c, 16 >> i, 16 >> i))) for i, c in enumerate(widths))
        pyr.append(FeaturePyramid(levels, (2, 4, 8, 16)))

    def outputs():
        z, diffs, state = head.forward_detailed(*pyr)
        return [z, *diffs.diffs, *state.weights]

    f = project_all(outputs(), rng)
    return grad_check(lambda: f(outputs()), head.parameters(), eps, samples, rng)


def _model_check(cfg: ModelConfig, seed: int, eps: float, samples: int, size: int = 32) -> float:
    """End-to-end check through backbone and head.

    The scalar projects the logits and every intermediate map (pyramid
    levels, differences, fusion weights). Parameters deep in the fusion
    cascade reach the logit only through repeated channel means and sigmoid
    slopes, so their logit gradients can fall to ~1e-9, where a central
    difference in float64 is dominated by rounding. Projecting the
    intermediates keeps every parameter's influence resolvable while the
    backward pass still runs through the whole graph.
    """
    rng = np.random.default_rng(seed)
    model = PRFNet(cfg, seed=seed)
    jitter(model.parameters(), rng)
    model.train()
    O, A, B = (Tensor(rng.uniform(0, 1, (1, 3, size, size))) for _ in range(3))
    saved = {n: b.copy() for n, b in model.named_buffers()}

    def outputs():
        z, pyramids, diffs, state = model.forward_detailed(O, A, B)
        return [z, *(t for p in pyramids for t in p.levels), *diffs.diffs, *state.weights]

    try:
        f = project_all(outputs(), rng)
        return grad_check(lambda: f(outputs()), model.parameters(), eps, samples, rng)
    finally:
        for n, b in model.named_buffers():
            np.copyto(b, saved[n])


def run_gradcheck(
    cfg: ModelConfig | None = None,
    seed: int = 0,
    eps: float = 1e-6,
    samples: int = 3,
    components: Sequence[str] | None = None,
) -> list[CheckRow]:
    """Check every block type, the head and the end-to-end model in float64."""
    cfg = cfg or ModelConfig()
    with precision("f64"):
        checks = _block_rows(seed, eps, samples)
        checks.append(("prf_head", lambda: _head_check(seed, eps, samples, True)))
        checks.append(("prf_head/non_cascaded", lambda: _head_check(seed, eps, samples, False)))
        checks.append(("prfnet", lambda: _model_check(cfg, seed, eps, samples)))
        rows = []
        for name, fn in checks:
            if components is not None and name not in components:
                continue
            t0 = time.perf_counter()
            err = fn()
            rows.append(CheckRow(name, err, time.perf_counter() - t0))
    return rows


def format_table(rows: Sequence[CheckRow]) -> str:
    width = max([len("component")] + [len(r.component) for r in rows])
    lines = [f"{'component':<{width}}  max_rel_error  result"]
    for r in rows:
        lines.append(f"{r.component:<{width}}  {r.max_rel_error:13.3e}  {'pass' if r.passed else 'FAIL'}")
    return "\n".join(lines)
