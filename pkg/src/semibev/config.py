"""Flat ``section.key = value`` configuration for training runs.

Precedence is command-line override > config file > built-in default.
Sections: ``trainer`` (TrainConfig fields), ``augment`` (AugmentConfig),
``model`` (ModelConfig). Unknown keys are errors, never ignored.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .augment import AugmentConfig
from .geometry import BorderMode
from .losses import LossWeights
from .model import ModelConfig


class ConfigError(ValueError):
    """Bad key or value in a config file or override."""


@dataclass(frozen=True)
class TrainConfig:
    # data
    train_dir: str = "data/train"
    eval_dir: str = "data/eval"
    out_dir: str = "runs/default"
    unlabeled_includes_labeled: bool = False
    # schedule (source scale: 25 epochs, batch 32, lr 1e-4 -> 1e-5 after 15 epochs)
    epochs: int = 40
    batch_size: int = 8
    lr_initial: float = 1e-3
    lr_final: float = 1e-4
    lr_decay_epoch: int = -1  # -1: drop after 60% of the epochs
    # losses and teacher
    lambda1: float = 2e-3
    lambda2: float = 2e-4
    ema_decay: float = 0.999
    ema_warmup: bool = True
    # misc
    seed: int = 0
    eval_every: int = 5
    threshold: float = 0.5
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.batch_size <= 0 or self.batch_size % 2:
            raise ConfigError(f"trainer.batch_size must be a positive even number, got {self.batch_size}")
        if not self.lr_initial >= self.lr_final > 0:
            raise ConfigError("need lr_initial >= lr_final > 0")
        if self.epochs < 0:
            raise ConfigError("trainer.epochs must be >= 0")
        if self.eval_every <= 0:
            raise ConfigError("trainer.eval_every must be positive")
        if not 0 <= self.ema_decay < 1:
            raise ConfigError("trainer.ema_decay must be in [0, 1)")
        if not 0 < self.threshold < 1:
            raise ConfigError("trainer.threshold must be in (0, 1)")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("loss weights must be non-negative")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2)

    @property
    def decay_epoch(self) -> int:
        return self.lr_decay_epoch if self.lr_decay_epoch >= 0 else int(round(0.6 * self.epochs))

    @property
    def semi_supervised(self) -> bool:
        return self.lambda1 > 0 or self.lambda2 > 0


_NESTED = {"augment": "augment", "model": "model"}


def _section_fields(section: str):
    if section == "trainer":
        return {f.name: f for f in fields(TrainConfig) if f.name not in _NESTED}
    if section == "augment":
        return {f.name: f for f in fields(AugmentConfig)}
    if section == "model":
        return {f.name: f for f in fields(ModelConfig) if f.name != "grid"}
    return None


def _coerce(raw: str, default, key: str):
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, BorderMode):
            return BorderMode.parse(text)
        if isinstance(default, tuple):
            return tuple(int(p) for p in text.replace(",", " ").split())
        return text
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}") from None


def _default_for(section: str, name: str):
    base = TrainConfig()
    obj = base if section == "trainer" else getattr(base, _NESTED[section])
    return getattr(obj, name)


def parse_assignments(pairs) -> dict[str, str]:
    """Validate (key, raw value) pairs; returns an ordered key -> raw map."""
    out = {}
    for key, value in pairs:
        if "." not in key:
            raise ConfigError(f"unknown config key {key!r} (expected section.key)")
        section, name = key.split(".", 1)
        known = _section_fields(section)
        if known is None or name not in known:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = value
    return out


def read_config_file(path) -> dict[str, str]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {path} not found")
    pairs = []
    for lineno, line in enumerate(p.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'section.key = value'")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return parse_assignments(pairs)


def build_config(file_values: dict[str, str] | None = None,
                 overrides: dict[str, str] | None = None) -> TrainConfig:
    merged = dict(file_values or {})
    merged.update(overrides or {})
    trainer, augment, model = {}, {}, {}
    target = {"trainer": trainer, "augment": augment, "model": model}
    for key, raw in parse_assignments(merged.items()).items():
        section, name = key.split(".", 1)
        target[section][name] = _coerce(raw, _default_for(section, name), key)
    try:
        base = TrainConfig()
        aug = replace(base.augment, **augment)
        mdl = replace(base.model, **model)
        return replace(base, augment=aug, model=mdl, **trainer)
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from None


def load_config(path=None, overrides: dict[str, str] | None = None) -> TrainConfig:
    return build_config(read_config_file(path) if path else None, overrides)


def dump_config(cfg: TrainConfig) -> str:
    """Render every addressable key, suitable for reading back."""
    lines = []
    for section in ("trainer", "augment", "model"):
        obj = cfg if section == "trainer" else getattr(cfg, section)
        for name in _section_fields(section):
            v = getattr(obj, name)
            if isinstance(v, BorderMode):
                v = v.value
            elif isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{section}.{name} = {v}")
    return "\n".join(lines) + "\n"
