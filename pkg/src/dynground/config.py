"""Flat ``key = value`` config files for :class:`TrainConfig`.

Blank lines and ``#`` comments are ignored. Values are parsed by the type of
the matching field; unknown keys are an error.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .training import TrainConfig

_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


class ConfigError(ValueError):
    pass


def _parse_value(key: str, raw: str):
    kind = _TYPES[key]
    try:
        if kind in ("bool", bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return low in ("true", "1")
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    values = dataclasses.asdict(base or TrainConfig())
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, raw)
    try:
        return TrainConfig(**values)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    return parse_config(Path(path).read_text(), base)


def format_config(config: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in dataclasses.asdict(config).items())


def apply_overrides(config: TrainConfig, pairs) -> TrainConfig:
    """Apply ``key=value`` strings, e.g. from repeated ``--set`` flags."""
    return parse_config("\n".join(pairs), config)
