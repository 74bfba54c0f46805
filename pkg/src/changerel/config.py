"""Model size presets and the training configuration."""
from __future__ import annotations

import dataclasses
import os
import types
import typing
from dataclasses import dataclass
from pathlib import Path

import yaml

from .errors import ConfigError


@dataclass(frozen=True)
class ModelSpec:
    name: str
    cnn_widths: tuple = (64, 128, 256, 512)
    pvt_dims: tuple = (64, 128, 320, 512)
    pvt_heads: tuple = (1, 2, 5, 8)
    pvt_sr: tuple = (8, 4, 2, 1)
    pvt_depths: tuple = (2, 2, 2, 2)
    pvt_mlp_ratio: int = 8
    scr_widths: tuple = (32, 64, 128, 256, 256)
    swin_heads: int = 4
    swin_window: int = 8
    cpb_hidden: int = 512
    channels: int = 64       # activation / decoder width
    ccr_width: int = 64
    pvf_channels: int = 64   # CRAM export width
    isci_kv_side: int = 32
    baseline_widths: tuple = (32, 64, 128, 256)


MODEL_SPECS = {
    "paper": ModelSpec("paper"),
    "tiny": ModelSpec(
        "tiny",
        cnn_widths=(32, 64, 128, 256),
        pvt_dims=(32, 64, 160, 256),
        pvt_depths=(1, 1, 1, 1),
        pvt_mlp_ratio=4,
        scr_widths=(16, 32, 64, 128, 128),
        cpb_hidden=64,
        channels=32,
        ccr_width=16,
        pvf_channels=32,
        isci_kv_side=16,
        baseline_widths=(16, 32, 64, 128),
    ),
}


def model_spec(name: str) -> ModelSpec:
    try:
        return MODEL_SPECS[name]
    except KeyError:
        raise ConfigError(f"unknown backbone size {name!r}; choose from {sorted(MODEL_SPECS)}") from None


CCR_MODES = ("ccr", "temporal", "none")


@dataclass
class TrainConfig:
    train_manifest: str = ""
    val_manifest: str = ""
    backbone: str = "tiny"
    model: str = "tribranch"          # tribranch | baseline
    tile_size: int = 128
    batch_size: int = 4
    lr: float = 1e-4
    steps: int = 2000
    lam: float = 0.5
    dice_sigma: float = 1.0
    frames: int = 4
    enable_scr: bool = True
    enable_ccr: bool = True
    ccr_mode: str = "ccr"
    augment: bool = True
    normalize_mean: typing.Optional[list] = None
    normalize_std: typing.Optional[list] = None
    threshold: float = 0.5
    seed: int = 0
    val_every: int = 100
    ckpt_every: int = 0
    checkpoint: str = ""
    out_dir: str = "runs/default"
    log_every: int = 1

    def __post_init__(self):
        self.validate()

    @property
    def effective_ccr_mode(self) -> str:
        return self.ccr_mode if self.enable_ccr else "none"

    def validate(self) -> None:
        if self.lam < 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")
        if self.ccr_mode not in CCR_MODES:
            raise ConfigError(f"ccr_mode must be one of {CCR_MODES}, got {self.ccr_mode!r}")
        if self.ccr_mode == "none":
            self.enable_ccr = False
        if self.enable_ccr and self.frames < 2:
            raise ConfigError(f"frames must be >= 2 when the CCR branch is enabled, got {self.frames}")
        if self.model not in ("tribranch", "baseline"):
            raise ConfigError(f"model must be 'tribranch' or 'baseline', got {self.model!r}")
        if self.model == "baseline" and self.ccr_mode == "temporal" and self.enable_ccr:
            raise ConfigError("the baseline only accepts ccr_mode 'ccr' or 'none'")
        model_spec(self.backbone)
        if self.tile_size % 32:
            raise ConfigError(f"tile_size must be a multiple of 32, got {self.tile_size}")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be >= 1 and steps >= 0")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**{k: _coerce(k, v) for k, v in data.items()})

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig.from_dict({**self.to_dict(), **changes})


_HINTS = None


def _field_type(key):
    global _HINTS
    if _HINTS is None:
        _HINTS = typing.get_type_hints(TrainConfig)
    return _HINTS[key]


def _coerce(key, value):
    tp = _field_type(key)
    optional = False
    if typing.get_origin(tp) in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        optional, tp = True, args[0]
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{key}: null is not allowed")
    tp = typing.get_origin(tp) or tp
    if tp is bool:
        if isinstance(value, bool):
            return value
    elif tp is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif tp is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif tp is str:
        if isinstance(value, (str, os.PathLike)):
            return str(value)
    elif tp is list:
        if isinstance(value, (list, tuple)):
            return [float(v) for v in value]
    raise ConfigError(f"{key}: expected {tp.__name__}, got {value!r}")


def parse_overrides(pairs) -> dict:
    """Turn ``key=value`` strings into a dict with YAML-typed values."""
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, raw = pair.split("=", 1)
        key = key.strip()
        try:
            value = yaml.safe_load(raw) if raw.strip() else ""
        except yaml.YAMLError as exc:
            raise ConfigError(f"override {pair!r}: {exc}") from None
        out[key] = value
    return out


def load_config(path=None, overrides=None) -> TrainConfig:
    data = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{p}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{p}: expected a key-value mapping")
    data.update(parse_overrides(overrides))
    try:
        return TrainConfig.from_dict(data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def dump_config(config: TrainConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=True), encoding="utf-8")
