"""Configuration records and the flat ``key = value`` config file."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from .errors import ConfigError

WEIGHT_MODES = ("scale_input", "scale_message")


@dataclass(frozen=True)
class WeightRule:
    epithelium_max: float = 0.1
    lymphocyte_min: float = 0.3
    debris_min: float = 0.3
    base: int = 1

    def __post_init__(self) -> None:
        for name in ("epithelium_max", "lymphocyte_min", "debris_min"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")


@dataclass(frozen=True)
class HyperParams:
    k_neighbors: int = 8
    hidden: int = 64
    pe_dim: int = 32
    layers: int = 4
    epsilon: float = 1e-7
    weight_mode: str = "scale_input"
    domain_weights_enabled: bool = True
    seed: int = 0
    symmetrize_edges: bool = False
    pe_normalized: bool = False
    feature_dim: int = 1024

    def __post_init__(self) -> None:
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if self.k_neighbors < 1:
            raise ConfigError(f"k_neighbors must be >= 1, got {self.k_neighbors}")
        if self.pe_dim % 4:
            raise ConfigError(f"pe_dim must be divisible by 4, got {self.pe_dim}")
        if self.weight_mode not in WEIGHT_MODES:
            raise ConfigError(f"weight_mode must be one of {WEIGHT_MODES}, got {self.weight_mode!r}")

    @property
    def width(self) -> int:
        return self.hidden + self.pe_dim


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    max_epochs: int = 200
    patience: int = 5
    folds: int = 5
    # informational: with k-fold CV the split is 1 - 1/folds
    train_frac: float = 0.8
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        if not 0.0 < self.train_frac < 1.0:
            raise ConfigError(f"train_frac must lie in (0, 1), got {self.train_frac}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.folds < 2:
            raise ConfigError(f"folds must be >= 2, got {self.folds}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")


CONFIG_CLASSES = (HyperParams, TrainConfig, WeightRule)


def config_keys() -> dict[str, type]:
    """Every flat config key with its value type (``seed`` is shared)."""
    keys: dict[str, type] = {}
    for cls in CONFIG_CLASSES:
        for f in fields(cls):
            keys[f.name] = type(f.default)
    return keys


def coerce(key: str, raw: str, types: dict[str, type] | None = None) -> Any:
    """Parse ``raw`` as the type of ``key`` (tuples are comma-separated floats)."""
    types = config_keys() if types is None else types
    if key not in types:
        raise ConfigError(f"unknown config key {key!r}")
    typ = types[key]
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
        if typ is tuple:
            return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {typ.__name__}") from None
    return text


def read_config_file(path: str | Path, types: dict[str, type] | None = None) -> dict[str, Any]:
    """Parse ``key = value`` lines; ``#`` starts a comment.

    ``types`` maps the accepted keys to their types (default: every
    HyperParams, TrainConfig and WeightRule field).
    """
    values: dict[str, Any] = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from exc
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        try:
            values[key] = coerce(key, raw, types)
        except ConfigError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from None
    return values


def build_configs(values: dict[str, Any]) -> tuple[HyperParams, TrainConfig, WeightRule]:
    out = []
    for cls in CONFIG_CLASSES:
        names = {f.name for f in fields(cls)}
        out.append(cls(**{k: v for k, v in values.items() if k in names}))
    return tuple(out)  # type: ignore[return-value]


def flatten(*configs) -> dict[str, Any]:
    flat: dict[str, Any] = {}
    for c in configs:
        flat.update(dataclasses.asdict(c))
    return flat
