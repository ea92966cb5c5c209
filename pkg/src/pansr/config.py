"""Flat ``key = value`` config files covering ModelConfig and TrainConfig fields.

Blank lines and ``#`` comments are ignored. Bias switches use dotted keys,
e.g. ``bias.fe = false``. Errors carry the offending line number.
"""
from __future__ import annotations

import dataclasses
from pathlib import Path

from .exceptions import ConfigError
from .nn import DEFAULT_BIAS_POLICY, ModelConfig
from .training import TrainConfig

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _field_types(cls):
    return {f.name: f for f in dataclasses.fields(cls)}


def _coerce(raw: str, default, where: str):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"expected a boolean, got {raw!r}")
        if isinstance(default, int):
            return int(raw.replace("_", ""))
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_config(text: str, source: str = "<config>") -> tuple[ModelConfig, TrainConfig]:
    model_fields = _field_types(ModelConfig)
    train_fields = _field_types(TrainConfig)
    model_defaults = ModelConfig(num_blocks=16)
    train_defaults = TrainConfig()
    model_kw, train_kw, bias = {}, {}, {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        where = f"{source}:{lineno}"
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if not key or not raw:
            raise ConfigError(f"{where}: empty key or value")
        if key.startswith("bias."):
            layer = key[5:]
            if layer not in DEFAULT_BIAS_POLICY:
                raise ConfigError(f"{where}: unknown bias switch {layer!r}")
            bias[layer] = _coerce(raw, True, where)
        elif key == "num_blocks":
            model_kw[key] = _coerce(raw, 0, where)
        elif key in model_fields and key != "bias_policy":
            model_kw[key] = _coerce(raw, getattr(model_defaults, key), where)
        elif key in train_fields:
            train_kw[key] = _coerce(raw, getattr(train_defaults, key), where)
        else:
            raise ConfigError(f"{where}: unknown key {key!r}")
    if bias:
        model_kw["bias_policy"] = bias
    try:
        model = ModelConfig(**model_kw).validate()
        train = TrainConfig(**train_kw).validate()
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    return model, train


def load_config(path) -> tuple[ModelConfig, TrainConfig]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))


def format_config(model: ModelConfig, train: TrainConfig) -> str:
    """Inverse of :func:`parse_config` (used to echo the effective settings)."""
    lines = ["# model"]
    for f in dataclasses.fields(ModelConfig):
        if f.name == "bias_policy":
            continue
        lines.append(f"{f.name} = {getattr(model, f.name)}")
    for layer, on in model.bias_policy.items():
        lines.append(f"bias.{layer} = {str(on).lower()}")
    lines.append("# training")
    for f in dataclasses.fields(TrainConfig):
        lines.append(f"{f.name} = {getattr(train, f.name)}")
    return "\n".join(lines) + "\n"
