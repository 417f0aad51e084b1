"""Run configuration and its ``key = value`` file format.

Keys carry a dotted section prefix (``model.channels = 32``); top-level keys
have none (``seed = 0``). Every key has a default and unknown keys are errors.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from steerer.model import FUSION_MODES


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    root: str = "corpus"
    preset: str = "two_scale"
    height: int = 128
    width: int = 128
    train: int = 200
    val: int = 50
    test: int = 0
    seed: int = 0


@dataclass
class ModelConfig:
    levels: int = 3
    channels: int = 32
    fusion_mode: str = "steerer"
    stem_layers: int = 2
    stage_layers: int = 1
    dtype: str = "float64"


@dataclass
class LossConfig:
    patch_px: int = 64
    alpha_base: float = 2.0
    eps: float = 1e-8


@dataclass
class OptimConfig:
    peak_lr: float = 1e-3
    warmup_epochs: float = 10.0
    epochs: int = 40
    batch_size: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    crop_px: int = 0


@dataclass
class DensityConfig:
    sigma0: float = 2.0


@dataclass
class LocalizeConfig:
    threshold: float = 0.1
    window: int = 3
    min_radius: float = 4.0


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    density: DensityConfig = field(default_factory=DensityConfig)
    localize: LocalizeConfig = field(default_factory=LocalizeConfig)
    seed: int = 0
    out: str = "runs/default"
    verbose: bool = False

    def validate(self) -> None:
        m, l, o = self.model, self.loss, self.optim
        if m.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"model.fusion_mode must be one of {FUSION_MODES}, got {m.fusion_mode!r}")
        if m.levels < 1 or m.channels < 2:
            raise ConfigError("model.levels must be >= 1 and model.channels >= 2")
        if m.dtype not in ("float64", "float32"):
            raise ConfigError(f"model.dtype must be float64 or float32, got {m.dtype!r}")
        coarsest = 2 ** (m.levels + 2)
        if l.patch_px <= 0 or l.patch_px % coarsest:
            raise ConfigError(f"loss.patch_px must be a positive multiple of {coarsest}, got {l.patch_px}")
        if l.alpha_base <= 0 or l.eps <= 0:
            raise ConfigError("loss.alpha_base and loss.eps must be positive")
        if o.peak_lr <= 0 or o.epochs < 1 or o.batch_size < 1 or o.warmup_epochs < 0:
            raise ConfigError("optim: need peak_lr > 0, epochs >= 1, batch_size >= 1, warmup_epochs >= 0")
        if o.crop_px and o.crop_px % l.patch_px:
            raise ConfigError(f"optim.crop_px must be a multiple of loss.patch_px ({l.patch_px})")
        if self.density.sigma0 <= 0:
            raise ConfigError("density.sigma0 must be positive")
        if self.localize.window < 3 or self.localize.window % 2 == 0 or self.localize.threshold <= 0:
            raise ConfigError("localize.window must be odd >= 3 and localize.threshold > 0")
        if self.data.height % l.patch_px or self.data.width % l.patch_px:
            raise ConfigError(f"data size {self.data.height}x{self.data.width} must be a multiple of "
                              f"loss.patch_px={l.patch_px}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        cfg = cls()
        for key, val in flatten(raw).items():
            set_key(cfg, key, val)
        return cfg


def flatten(d: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


def _coerce(raw: Any, typ: type, key: str):
    if not isinstance(raw, str):
        return typ(raw)
    text = raw.strip()
    try:
        if typ is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {typ.__name__}") from None
    return text


def set_key(cfg: RunConfig, key: str, value: Any) -> None:
    parts = key.split(".")
    target = cfg
    for part in parts[:-1]:
        if not dataclasses.is_dataclass(target) or part not in {f.name for f in dataclasses.fields(target)}:
            raise ConfigError(f"unknown config key {key!r}")
        target = getattr(target, part)
    name = parts[-1]
    fields = {f.name: f for f in dataclasses.fields(target)} if dataclasses.is_dataclass(target) else {}
    if name not in fields or dataclasses.is_dataclass(getattr(target, name)):
        raise ConfigError(f"unknown config key {key!r}")
    typ = type(getattr(target, name))
    setattr(target, name, _coerce(value, typ, key))


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        try:
            set_key(cfg, key, val)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), str(path))


def format_config(cfg: RunConfig) -> str:
    return "\n".join(f"{k} = {v}" for k, v in flatten(cfg.to_dict()).items()) + "\n"
