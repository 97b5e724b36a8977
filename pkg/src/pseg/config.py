"""``key = value`` configuration files and the per-stage training config."""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .errors import ConfigError, ParseError

STAGES = ("pretrain", "finetune", "detector", "segmenter")

_STAGE_DEFAULTS = {
    # stage: (epochs, batch_size, freeze, lr); pretraining stands in for a
    # large-scale run, the rest use the published fine-tuning rate
    "pretrain": (30, 8, False, 1e-3),
    "finetune": (20, 32, True, 1e-4),
    "detector": (100, 16, False, 1e-4),
    "segmenter": (100, 8, False, 1e-4),
}


def parse_kv(text, source="<config>"):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(source, f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ParseError(source, f"line {lineno}: empty key")
        out[key] = value
    return out


def read_kv(path):
    path = Path(path)
    try:
        return parse_kv(path.read_text(encoding="utf-8"), path)
    except (OSError, UnicodeDecodeError) as exc:
        raise ParseError(path, f"cannot read config ({exc})") from None


def format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(raw, typ, name):
    origin = typing.get_origin(typ)
    if origin is typing.Union:
        args = [a for a in typing.get_args(typ) if a is not type(None)]
        if raw in ("", "None", "none"):
            return None
        return _coerce(raw, args[0], name)
    try:
        if typ is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is tuple or origin is tuple:
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            return tuple(float(p) if "." in p or "e" in p.lower() else int(p) for p in parts)
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot interpret {raw!r} as {getattr(typ, '__name__', typ)}") from None


def apply_overrides(obj, values, prefix=""):
    """Return a copy of dataclass ``obj`` with string ``values`` coerced onto its fields."""
    hints = typing.get_type_hints(type(obj))
    changes = {}
    for f in dataclasses.fields(obj):
        key = prefix + f.name
        if key in values:
            changes[f.name] = _coerce(values[key], hints[f.name], key)
    return dataclasses.replace(obj, **changes)


def to_lines(obj, prefix=""):
    return [f"{prefix}{f.name} = {format_value(getattr(obj, f.name))}"
            for f in dataclasses.fields(obj)]


@dataclass
class TrainConfig:
    stage: str = "pretrain"
    lr: float = 1e-4
    epochs: int = 30
    batch_size: int = 8
    seed: Optional[int] = None
    freeze_encoder: bool = False
    freeze_prompt_encoder: bool = False
    validation_fraction: float = 0.1
    train_fraction: float = 0.8
    split_seed: int = 0
    # pretraining prompt curriculum: P(box), P(points); the rest is no prompt
    p_box: float = 0.5
    p_points: float = 0.25
    max_points: int = 5
    model_seed: int = 0
    # probability that a training image is swapped for an augmented copy
    augment: float = 0.5

    @classmethod
    def for_stage(cls, stage, **overrides):
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}")
        epochs, batch, freeze, lr = _STAGE_DEFAULTS[stage]
        cfg = cls(stage=stage, epochs=epochs, batch_size=batch, lr=lr,
                  freeze_encoder=freeze, freeze_prompt_encoder=freeze)
        return dataclasses.replace(cfg, **overrides).validate()

    def validate(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.stage == "finetune" and not (self.freeze_encoder and self.freeze_prompt_encoder):
            raise ConfigError("finetune requires both freeze flags")
        if self.stage == "pretrain" and (self.freeze_encoder or self.freeze_prompt_encoder):
            raise ConfigError("pretrain trains every component; freeze flags must be false")
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("lr, epochs and batch_size must be positive")
        if not 0 <= self.validation_fraction < 1 or not 0 < self.train_fraction < 1:
            raise ConfigError("fractions out of range")
        if self.p_box < 0 or self.p_points < 0 or self.p_box + self.p_points > 1:
            raise ConfigError("prompt curriculum probabilities must sum to at most 1")
        if not 0 <= self.augment <= 1:
            raise ConfigError("augment is a probability")
        return self


def load_train_config(stage, path=None, seed=None, extra=None):
    """Stage defaults, then the config file, then explicit overrides."""
    cfg = TrainConfig.for_stage(stage)
    values = read_kv(path) if path else {}
    if "stage" in values and values["stage"] != stage:
        raise ConfigError(f"config file is for stage {values['stage']!r}, not {stage!r}")
    cfg = apply_overrides(cfg, values)
    if extra:
        cfg = dataclasses.replace(cfg, **extra)
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    return cfg.validate()
