"""Losses, SGD, the learning-rate schedule and the coarse/fine/mtl training loops."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
from scipy.special import expit

from . import ops
from .data import TripletDataset
from .model import PRFNet
from .tensor import Parameter, Tape, Tensor, apply_op

log = logging.getLogger(__name__)

STAGES = ("coarse", "fine", "mtl")
PROB_EPS = 1e-7

_STAGE_DEFAULTS = {
    "coarse": dict(epochs=40, lr0=1e-3),
    "fine": dict(epochs=20, lr0=1e-4),
    "mtl": dict(epochs=40, lr0=1e-3),
}


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "coarse"
    batch_size: int = 16
    epochs: int = 40
    lr0: float = 1e-3
    lr_decay_every: int = 10
    lr_decay_factor: float = 10.0
    crop: int | None = None  # None trains on full images
    seed: int = 0
    momentum: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if self.batch_size < 1 or self.epochs < 0 or self.lr_decay_every < 1:
            raise ValueError("batch_size and lr_decay_every must be positive, epochs nonnegative")
        if not self.lr0 > 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if not self.lr_decay_factor > 1:
            raise ValueError(f"lr_decay_factor must exceed 1, got {self.lr_decay_factor}")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("momentum must be in [0, 1) and weight_decay nonnegative")

    @classmethod
    def for_stage(cls, stage: str, **overrides) -> "TrainConfig":
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
        return cls(stage=stage, **{**_STAGE_DEFAULTS[stage], **overrides})


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    lr: float
    val_accuracy: float
    seconds: float


@dataclass
class TrainRecord:
    stage: str
    epochs: list[EpochRecord] = field(default_factory=list)

    COLUMNS = ("epoch", "loss", "lr", "val_accuracy", "seconds")

    def append(self, rec: EpochRecord) -> None:
        if rec.epoch != len(self.epochs):
            raise ValueError(f"epoch {rec.epoch} recorded out of order (expected {len(self.epochs)})")
        self.epochs.append(rec)

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.epochs]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for r in self.epochs:
                w.writerow([r.epoch, repr(r.loss), repr(r.lr), repr(r.val_accuracy), f"{r.seconds:.3f}"])


# --------------------------------------------------------------------------- #
# Losses
# --------------------------------------------------------------------------- #
def _check_batch(x: Tensor, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=x.dtype)
    if x.ndim != 1 or x.shape[0] == 0:
        raise ValueError(f"loss expects a nonempty 1-D batch, got shape {x.shape}")
    if y.shape != x.shape:
        raise ValueError(f"prediction shape {x.shape} and label shape {y.shape} differ")
    return y


def _check_binary(y: np.ndarray) -> None:
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("BCE labels must be 0 or 1")


def bce_with_logits(z: Tensor, y) -> Tensor:
    """Mean binary cross-entropy of sigmoid(z) against y, in log-sum-exp form."""
    y = _check_batch(z, y)
    _check_binary(y)
    zd = z.data
    per = np.maximum(zd, 0) - zd * y + np.log1p(np.exp(-np.abs(zd)))
    out = np.asarray(per.mean(), dtype=zd.dtype)
    return apply_op(out, (z,), _bce_logits_bwd, (zd, y))


def _bce_logits_bwd(ctx, g):
    zd, y = ctx
    return (g * (expit(zd) - y) / zd.shape[0],)


def bce_loss(y, *, logits: Tensor | None = None, probs: Tensor | None = None) -> Tensor:
    """Binary cross-entropy from logits (preferred) or from probabilities.

    Probabilities are clamped to [1e-7, 1 - 1e-7]; the clamp passes no
    gradient outside that interval.
    """
    if (logits is None) == (probs is None):
        raise ValueError("pass exactly one of logits= or probs=")
    if logits is not None:
        return bce_with_logits(logits, y)
    y = _check_batch(probs, y)
    _check_binary(y)
    p = np.clip(probs.data, PROB_EPS, 1 - PROB_EPS)
    out = -np.mean(y * np.log(p) + (1 - y) * np.log1p(-p))
    return apply_op(np.asarray(out, dtype=probs.dtype), (probs,), _bce_probs_bwd, (probs.data, p, y))


def _bce_probs_bwd(ctx, g):
    raw, p, y = ctx
    inside = (raw >= PROB_EPS) & (raw <= 1 - PROB_EPS)
    return (g * inside * (p - y) / (p * (1 - p)) / raw.shape[0],)


def mse_loss(q: Tensor, target) -> Tensor:
    """Mean squared error between predicted and soft-label probabilities."""
    t = _check_batch(q, target)
    diff = q.data - t
    return apply_op(np.asarray(np.mean(diff * diff), dtype=q.dtype), (q,), _mse_bwd, diff)


def _mse_bwd(diff, g):
    return (g * 2 * diff / diff.shape[0],)


# --------------------------------------------------------------------------- #
# Optimisation
# --------------------------------------------------------------------------- #
def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    return cfg.lr0 / cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


def _trainable(params: Iterable[Parameter]) -> list[Parameter]:
    out = []
    for p in params:
        if p.frozen:
            continue
        if p.grad is None:
            raise ValueError(f"parameter {p.name or '<unnamed>'} has no gradient")
        out.append(p)
    return out


def sgd_step(params: Iterable[Parameter], lr: float) -> None:
    """p <- p - lr * grad for every non-frozen parameter, then clear grads."""
    if lr < 0:
        raise ValueError(f"learning rate must be nonnegative, got {lr}")
    params = list(params)
    for p in _trainable(params):
        p.data -= np.asarray(lr, dtype=p.dtype) * p.grad
    for p in params:
        p.grad = None


class SGD:
    """SGD with optional momentum and L2 weight decay; both default to off."""

    def __init__(self, params: Iterable[Parameter], momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity: dict[int, np.ndarray] = {}

    def step(self, lr: float) -> None:
        if self.momentum == 0 and self.weight_decay == 0:
            sgd_step(self.params, lr)
            return
        for p in _trainable(self.params):
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                v = self._velocity.get(id(p))
                v = g.copy() if v is None else self.momentum * v + g
                self._velocity[id(p)] = v
                g = v
            p.data -= np.asarray(lr, dtype=p.dtype) * g
        for p in self.params:
            p.grad = None


# --------------------------------------------------------------------------- #
# Evaluation
# --------------------------------------------------------------------------- #
def accuracy_from_scores(q, labels) -> float:
    """Fraction with (q > 0.5) == (y == 1); q == 0.5 always counts as wrong."""
    q = np.asarray(q, dtype=np.float64)
    y = np.asarray(labels)
    if q.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    if q.shape != y.shape:
        raise ValueError(f"score shape {q.shape} and label shape {y.shape} differ")
    return float(np.mean(correct_mask(q, y)))


def correct_mask(q, labels) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    y = np.asarray(labels)
    return ((q > 0.5) == (y == 1)) & (q != 0.5)


def predict(model: PRFNet, dataset: TripletDataset, batch_size: int = 64) -> np.ndarray:
    """Eval-mode q for every triplet, at full resolution."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    was_training = model.backbone.training, model.head.training
    model.eval()
    dtype = model.parameters()[0].dtype
    try:
        out = []
        for start in range(0, len(dataset), batch_size):
            O, A, B, _, _ = dataset.batch(np.arange(start, min(start + batch_size, len(dataset))), dtype=dtype)
            out.append(model.score(O, A, B))
    finally:
        model.backbone.train(was_training[0])
        model.head.train(was_training[1])
    return np.concatenate(out).astype(np.float64)


def evaluate_accuracy(model: PRFNet, dataset: TripletDataset, batch_size: int = 64) -> float:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if not dataset.has_hard_labels:
        raise ValueError("accuracy needs hard labels on every triplet")
    return accuracy_from_scores(predict(model, dataset, batch_size), dataset.hard)


# --------------------------------------------------------------------------- #
# Training
# --------------------------------------------------------------------------- #
def _check_stage_inputs(model: PRFNet, dataset: TripletDataset, stage: str) -> None:
    if len(dataset) == 0:
        raise ValueError("empty training set")
    if stage in ("coarse", "mtl") and not dataset.has_hard_labels:
        raise ValueError(f"{stage} stage needs a hard label on every triplet")
    if stage in ("fine", "mtl") and not dataset.has_soft_labels:
        raise ValueError(f"{stage} stage needs a soft label on every triplet")
    if stage == "fine" and "coarse" not in model.trained_stages:
        raise ValueError("fine stage needs a coarse-trained model; resume from a coarse checkpoint")


def _prepare(model: PRFNet, stage: str) -> None:
    model.train()
    if stage == "fine":
        model.backbone.freeze()
        model.backbone.eval()
    else:
        model.backbone.unfreeze()
    model.head.unfreeze()


def stage_loss(model: PRFNet, stage: str, O, A, B, hard, soft) -> Tensor:
    t = [Tensor(x) for x in (O, A, B)]
    z = model.logits(*t)
    if stage == "coarse":
        return bce_with_logits(z, hard)
    q = ops.sigmoid(z)
    if stage == "fine":
        return mse_loss(q, soft)
    return ops.add(bce_with_logits(z, hard), mse_loss(q, soft))


def train_stage(
    model: PRFNet,
    dataset: TripletDataset,
    cfg: TrainConfig,
    val: TripletDataset | None = None,
    on_epoch: Callable[[EpochRecord, bool], None] | None = None,
) -> tuple[PRFNet, TrainRecord]:
    """Train ``model`` in place for one stage and return it with its record.

    ``on_epoch(record, is_best)`` runs after each epoch; the CLI uses it to
    write best-validation checkpoints.
    """
    _check_stage_inputs(model, dataset, cfg.stage)
    _prepare(model, cfg.stage)
    rng = np.random.default_rng(cfg.seed)
    dtype = model.parameters()[0].dtype
    params = model.parameters()
    opt = SGD(params, cfg.momentum, cfg.weight_decay)
    record = TrainRecord(cfg.stage)
    best = -math.inf
    n = len(dataset)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_schedule(epoch, cfg)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            O, A, B, hard, soft = dataset.batch(idx, crop=cfg.crop, rng=rng, dtype=dtype)
            with Tape() as tape:
                loss = stage_loss(model, cfg.stage, O, A, B, hard, soft)
            tape.backward(loss)
            opt.step(lr)
            total += float(loss.item()) * len(idx)
        val_acc = evaluate_accuracy(model, val) if val is not None else math.nan
        if val is not None:
            _prepare(model, cfg.stage)
        rec = EpochRecord(epoch, total / n, lr, val_acc, time.perf_counter() - t0)
        record.append(rec)
        is_best = val is not None and val_acc > best
        best = max(best, val_acc) if val is not None else best
        log.info("%s epoch %d loss %.6f lr %.3g val %.4f (%.1fs)", cfg.stage, epoch, rec.loss, lr, val_acc, rec.seconds)
        if on_epoch is not None:
            on_epoch(rec, is_best)
    model.trained_stages.append(cfg.stage)
    return model, record


def train_progressive(
    model: PRFNet,
    dataset: TripletDataset,
    coarse: TrainConfig,
    fine: TrainConfig,
    val: TripletDataset | None = None,
) -> tuple[PRFNet, TrainRecord, TrainRecord]:
    """Coarse stage on hard labels, then fine stage on soft labels."""
    if coarse.stage != "coarse" or fine.stage != "fine":
        raise ValueError("train_progressive needs a coarse and a fine config")
    model, rc = train_stage(model, dataset, coarse, val)
    model, rf = train_stage(model, dataset, fine, val)
    return model, rc, rf


def with_stage(cfg: TrainConfig, stage: str, **overrides) -> TrainConfig:
    return replace(cfg, stage=stage, **overrides)
