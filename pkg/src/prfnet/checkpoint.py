"""Binary checkpoint format.

Layout, all integers little-endian::

    b"PRFN"  u32 version
    u32 metadata length, metadata as canonical JSON (sorted keys, UTF-8)
    u32 tensor count, then per tensor:
        u32 name length, name (UTF-8), u8 dtype tag, u8 rank,
        rank x u32 extents, little-endian payload

Parameters and batch-norm running statistics are stored in the model's
enumeration order, so save -> load -> save reproduces the same bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig
from .model import ModelConfig, PRFNet

MAGIC = b"PRFN"
VERSION = 1
DTYPE_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
TAG_DTYPES = {tag: dt for dt, tag in DTYPE_TAGS.items()}


class CheckpointError(ValueError):
    """Malformed checkpoint bytes."""


class CheckpointMismatch(ValueError):
    """Checkpoint tensors do not fit the target model."""

    def __init__(self, diffs: list[str]):
        self.diffs = diffs
        super().__init__("checkpoint does not match model:\n  " + "\n  ".join(diffs))


class ConfigDigestWarning(UserWarning):
    pass


def config_digest(cfg: ModelConfig) -> str:
    text = json.dumps(cfg.as_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def model_config_from_dict(d: dict) -> ModelConfig:
    bb = {k: tuple(v) if isinstance(v, list) else v for k, v in d["backbone"].items()}
    return ModelConfig(backbone=BackboneConfig(**bb), mlp_hidden=d["mlp_hidden"], cascaded=d["cascaded"])


@dataclass
class CheckpointMeta:
    stage: str = ""
    epoch: int = -1
    seed: int = 0
    config_digest: str = ""
    model_config: dict = field(default_factory=dict)
    trained_stages: list[str] = field(default_factory=list)

    def to_json(self) -> bytes:
        return json.dumps(vars(self), sort_keys=True, separators=(",", ":")).encode()


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def encode(tensors: list[tuple[str, np.ndarray]], meta: CheckpointMeta) -> bytes:
    out = [MAGIC, _u32(VERSION)]
    mj = meta.to_json()
    out += [_u32(len(mj)), mj, _u32(len(tensors))]
    for name, arr in tensors:
        arr = np.asarray(arr)
        le = arr.dtype.newbyteorder("<")
        if le not in DTYPE_TAGS:
            raise CheckpointError(f"tensor {name}: unsupported dtype {arr.dtype}")
        nb = name.encode()
        out += [_u32(len(nb)), nb, struct.pack("<BB", DTYPE_TAGS[le], arr.ndim)]
        out += [_u32(d) for d in arr.shape]
        out.append(np.ascontiguousarray(arr, dtype=le).tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError("truncated checkpoint")
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def decode(raw: bytes) -> tuple[list[tuple[str, np.ndarray]], CheckpointMeta]:
    r = _Reader(raw)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        meta = CheckpointMeta(**json.loads(r.take(r.u32())))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"bad checkpoint metadata: {exc}") from None
    tensors = []
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        tag, rank = struct.unpack("<BB", r.take(2))
        if tag not in TAG_DTYPES:
            raise CheckpointError(f"tensor {name}: unknown dtype tag {tag}")
        dt = TAG_DTYPES[tag]
        shape = tuple(r.u32() for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(count * dt.itemsize), dtype=dt).reshape(shape)
        tensors.append((name, arr.astype(dt.newbyteorder("="))))
    if r.pos != len(raw):
        raise CheckpointError(f"{len(raw) - r.pos} trailing bytes after tensor table")
    return tensors, meta


def model_tensors(model: PRFNet) -> list[tuple[str, np.ndarray]]:
    return [(n, p.data) for n, p in model.named_parameters()] + list(model.named_buffers())


def save_checkpoint(path, model: PRFNet, stage: str = "", epoch: int = -1, seed: int = 0) -> None:
    meta = CheckpointMeta(
        stage=stage,
        epoch=epoch,
        seed=seed,
        config_digest=config_digest(model.cfg),
        model_config=model.cfg.as_dict(),
        trained_stages=list(model.trained_stages),
    )
    Path(path).write_bytes(encode(model_tensors(model), meta))


def state_diff(model: PRFNet, tensors: list[tuple[str, np.ndarray]]) -> list[str]:
    """Human-readable differences between a model's tensors and a checkpoint's."""
    want = dict(model_tensors(model))
    have = dict(tensors)
    diffs = [f"missing from checkpoint: {n}" for n in want if n not in have]
    diffs += [f"unexpected in checkpoint: {n}" for n in have if n not in want]
    for n, arr in have.items():
        if n not in want:
            continue
        if arr.shape != want[n].shape:
            diffs.append(f"{n}: shape {arr.shape} in checkpoint, {want[n].shape} in model")
        elif arr.dtype != want[n].dtype:
            diffs.append(f"{n}: dtype {arr.dtype} in checkpoint, {want[n].dtype} in model")
    return diffs


def load_into(model: PRFNet, path) -> CheckpointMeta:
    """Copy checkpoint tensors into an existing model; architecture must match."""
    tensors, meta = decode(Path(path).read_bytes())
    diffs = state_diff(model, tensors)
    if diffs:
        raise CheckpointMismatch(diffs)
    if meta.config_digest != config_digest(model.cfg):
        warnings.warn(
            f"checkpoint config digest {meta.config_digest[:12]} differs from model {config_digest(model.cfg)[:12]}",
            ConfigDigestWarning,
            stacklevel=2,
        )
    target = dict(model_tensors(model))
    for name, arr in tensors:
        np.copyto(target[name], arr)
    model.trained_stages = list(meta.trained_stages)
    return meta


def load_checkpoint(path, cfg: ModelConfig | None = None) -> tuple[PRFNet, CheckpointMeta]:
    """Rebuild a model from a checkpoint.

    Without ``cfg`` the architecture stored in the checkpoint is used.
    """
    tensors, meta = decode(Path(path).read_bytes())
    if cfg is None:
        if not meta.model_config:
            raise CheckpointError("checkpoint carries no model config; pass one explicitly")
        cfg = model_config_from_dict(meta.model_config)
    model = PRFNet(cfg, seed=meta.seed)
    params = dict(model.named_parameters())
    dtypes = {arr.dtype for n, arr in tensors if n in params}
    if len(dtypes) == 1:
        model.astype(dtypes.pop())
    return model, load_into(model, path)
