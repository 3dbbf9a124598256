"""Run configuration read from an INI file.

Sections and keys (all optional unless noted)::

    [model]
    preset = toy | full          ; starting point, default toy
    stem_width = 8
    stage_widths = 32, 64, 128, 256
    block_counts = 3, 4, 6, 3
    stage_strides = 1, 2, 2, 2
    res2net_scale = 4
    se_reduction = 4
    block_type = se_res2net | res2net | bottleneck
    mlp_hidden = 32
    fusion.cascaded = true

    [train]                      ; shared by every stage
    batch_size, epochs, lr0, lr_decay_every, lr_decay_factor,
    seed, momentum, weight_decay

    [train.coarse] / [train.fine] / [train.mtl]
    same keys as [train], overriding it for one stage

    [data]
    train_manifest = path        ; required for train
    val_manifest = path
    crop = 32                    ; training crop, omit for full images

    [io]
    checkpoint_dir = path        ; default: checkpoints
    report_dir = path            ; default: reports

Relative paths are resolved against the config file's directory. Unknown
sections or keys are errors.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .backbone import BackboneConfig
from .model import ModelConfig
from .trainer import STAGES, TrainConfig


class ConfigError(ValueError):
    pass


_TUPLE_KEYS = ("stage_widths", "block_counts", "stage_strides")
_INT_KEYS = ("stem_width", "res2net_scale", "se_reduction", "mlp_hidden")
_MODEL_KEYS = {"preset", "block_type", "fusion.cascaded", *_TUPLE_KEYS, *_INT_KEYS}
_TRAIN_TYPES = {
    "batch_size": int,
    "epochs": int,
    "lr0": float,
    "lr_decay_every": int,
    "lr_decay_factor": float,
    "seed": int,
    "momentum": float,
    "weight_decay": float,
}
_DATA_KEYS = {"train_manifest", "val_manifest", "crop"}
_IO_KEYS = {"checkpoint_dir", "report_dir"}
_SECTIONS = {"model", "train", "data", "io", *(f"train.{s}" for s in STAGES)}


@dataclass(frozen=True)
class DataConfig:
    train_manifest: Path | None = None
    val_manifest: Path | None = None
    crop: int | None = None


@dataclass(frozen=True)
class IOConfig:
    checkpoint_dir: Path = Path("checkpoints")
    report_dir: Path = Path("reports")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: dict[str, TrainConfig] = field(default_factory=lambda: {s: TrainConfig.for_stage(s) for s in STAGES})
    data: DataConfig = field(default_factory=DataConfig)
    io: IOConfig = field(default_factory=IOConfig)

    def stage(self, name: str, seed: int | None = None) -> TrainConfig:
        cfg = self.train[name]
        return replace(cfg, seed=cfg.seed if seed is None else seed)


def _check_keys(section: configparser.SectionProxy, allowed) -> None:
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError(f"[{section.name}]: unknown key(s) {', '.join(unknown)}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(",", " ").split())


def _model(sec) -> ModelConfig:
    _check_keys(sec, _MODEL_KEYS)
    preset = sec.get("preset", "toy")
    if preset not in ("toy", "full"):
        raise ConfigError(f"[model] preset must be toy or full, got {preset!r}")
    base = ModelConfig.full() if preset == "full" else ModelConfig()
    bb = {}
    for k in _TUPLE_KEYS:
        if k in sec:
            bb[k] = _ints(sec[k])
    for k in ("stem_width", "res2net_scale", "se_reduction"):
        if k in sec:
            bb[k] = sec.getint(k)
    if "block_type" in sec:
        bb["block_type"] = sec["block_type"]
    return ModelConfig(
        backbone=replace(base.backbone, **bb),
        mlp_hidden=sec.getint("mlp_hidden", base.mlp_hidden),
        cascaded=sec.getboolean("fusion.cascaded", base.cascaded),
    )


def _train_values(sec) -> dict:
    _check_keys(sec, _TRAIN_TYPES)
    return {k: _TRAIN_TYPES[k](sec[k]) for k in sec}


def _path(base: Path, text: str) -> Path:
    p = Path(text).expanduser()
    return p if p.is_absolute() else base / p


def parse_config(text: str, base_dir=".", check_paths: bool = True) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    unknown = sorted(set(cp.sections()) - _SECTIONS)
    if unknown:
        raise ConfigError(f"unknown section(s) {', '.join(unknown)}")
    base = Path(base_dir)
    try:
        model = _model(cp["model"]) if cp.has_section("model") else ModelConfig()
        shared = _train_values(cp["train"]) if cp.has_section("train") else {}
        data_sec = cp["data"] if cp.has_section("data") else {}
        if data_sec:
            _check_keys(data_sec, _DATA_KEYS)
        crop = int(data_sec["crop"]) if "crop" in data_sec else None
        train = {}
        for s in STAGES:
            own = _train_values(cp[f"train.{s}"]) if cp.has_section(f"train.{s}") else {}
            train[s] = TrainConfig.for_stage(s, crop=crop, **{**shared, **own})
        data = DataConfig(
            train_manifest=_path(base, data_sec["train_manifest"]) if "train_manifest" in data_sec else None,
            val_manifest=_path(base, data_sec["val_manifest"]) if "val_manifest" in data_sec else None,
            crop=crop,
        )
        io_sec = cp["io"] if cp.has_section("io") else {}
        if io_sec:
            _check_keys(io_sec, _IO_KEYS)
        io = IOConfig(
            checkpoint_dir=_path(base, io_sec.get("checkpoint_dir", "checkpoints")),
            report_dir=_path(base, io_sec.get("report_dir", "reports")),
        )
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    if check_paths:
        for p in (data.train_manifest, data.val_manifest):
            if p is not None and not p.is_file():
                raise ConfigError(f"manifest not found: {p}")
    return RunConfig(model=model, train=train, data=data, io=io)


def load_config(path, check_paths: bool = True) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), path.parent, check_paths)


def dump_config(cfg: RunConfig) -> str:
    """INI text that parses back to ``cfg`` (paths written as absolute)."""
    bb = cfg.model.backbone
    lines = ["[model]"]
    lines += [f"stem_width = {bb.stem_width}"]
    lines += [f"{k} = {', '.join(map(str, getattr(bb, k)))}" for k in _TUPLE_KEYS]
    lines += [
        f"res2net_scale = {bb.res2net_scale}",
        f"se_reduction = {bb.se_reduction}",
        f"block_type = {bb.block_type}",
        f"mlp_hidden = {cfg.model.mlp_hidden}",
        f"fusion.cascaded = {str(cfg.model.cascaded).lower()}",
        "",
    ]
    for s in STAGES:
        tc = cfg.train[s]
        lines.append(f"[train.{s}]")
        lines += [f"{f.name} = {getattr(tc, f.name)}" for f in fields(tc) if f.name in _TRAIN_TYPES]
        lines.append("")
    lines.append("[data]")
    if cfg.data.train_manifest is not None:
        lines.append(f"train_manifest = {cfg.data.train_manifest.resolve()}")
    if cfg.data.val_manifest is not None:
        lines.append(f"val_manifest = {cfg.data.val_manifest.resolve()}")
    if cfg.data.crop is not None:
        lines.append(f"crop = {cfg.data.crop}")
    lines += ["", "[io]", f"checkpoint_dir = {cfg.io.checkpoint_dir.resolve()}", f"report_dir = {cfg.io.report_dir.resolve()}", ""]
    return "\n".join(lines)
