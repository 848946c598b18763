"""Flat ``key=value`` configuration files shared by ModelConfig and TrainConfig."""

from __future__ import annotations

import dataclasses
from fractions import Fraction
from pathlib import Path

from .model import ConfigError, ModelConfig
from .train import TrainConfig


class UnknownKeyError(ConfigError):
    def __init__(self, key: str):
        self.key = key
        super().__init__(f"unknown config key {key!r}; valid keys: {', '.join(valid_keys())}")


def valid_keys() -> list:
    return [f.name for f in dataclasses.fields(ModelConfig)] + \
           [f.name for f in dataclasses.fields(TrainConfig)]


def defaults() -> dict:
    out = dataclasses.asdict(ModelConfig())
    out.update(dataclasses.asdict(TrainConfig()))
    return out


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(key: str, text: str, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(Fraction(text)) if "/" in text else float(text)
        if isinstance(default, tuple):
            return tuple(int(x) for x in text.split(",") if x.strip())
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc


def parse_lines(text: str) -> dict:
    out = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {raw!r}")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def build(overrides: dict | None = None, base: dict | None = None):
    """(ModelConfig, TrainConfig) from string or typed overrides."""
    values = defaults()
    if base:
        values.update(base)
    ref = defaults()
    for key, val in (overrides or {}).items():
        if key not in ref:
            raise UnknownKeyError(key)
        values[key] = parse_value(key, val, ref[key]) if isinstance(val, str) else val
    mkeys = {f.name for f in dataclasses.fields(ModelConfig)}
    try:
        mcfg = ModelConfig(**{k: v for k, v in values.items() if k in mkeys})
        tcfg = TrainConfig(**{k: v for k, v in values.items() if k not in mkeys})
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    return mcfg, tcfg


def dump(*cfgs) -> str:
    lines = []
    for cfg in cfgs:
        for f in dataclasses.fields(cfg):
            lines.append(f"{f.name}={format_value(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def load(path) -> tuple:
    return build(parse_lines(Path(path).read_text(encoding="utf-8")))
