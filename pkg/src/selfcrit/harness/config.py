"""Declarative JSON configs for the experiment drivers.

A config file is a JSON object whose top-level keys are field names of the
target dataclass (unknown keys are errors).  Learning rates must be plain
numbers or explicit scientific notation such as ``"1e-5"``; the ambiguous
``10e-5`` spelling is rejected because it reads as either 1e-4 or 1e-5.
"""
from __future__ import annotations

import dataclasses
import json
import re
from pathlib import Path


class ConfigError(ValueError):
    pass


_AMBIGUOUS_LR = re.compile(r'"(\w*lr\w*)"\s*:\s*"?\s*10(?:\.0*)?[eE]-')


def parse_lr(value, key: str = "lr") -> float:
    if isinstance(value, bool):
        raise ConfigError(f"{key}: expected a number, got {value!r}")
    if isinstance(value, str):
        if re.match(r"\s*10(?:\.0*)?[eE]-", value):
            raise ConfigError(f"{key}: {value!r} is ambiguous; write 1e-N explicitly")
        try:
            value = float(value)
        except ValueError as exc:
            raise ConfigError(f"{key}: cannot parse {value!r} as a number") from exc
    if not isinstance(value, (int, float)) or not value > 0:
        raise ConfigError(f"{key}: learning rate must be a positive number, got {value!r}")
    return float(value)


def read_json(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    m = _AMBIGUOUS_LR.search(text)
    if m:
        raise ConfigError(f"{path}: {m.group(1)} uses the ambiguous 10e-N notation; write 1e-N explicitly")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def build(cls, data: dict, **overrides):
    """Instantiate dataclass ``cls`` from a dict, nested dataclass fields included."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in {**data, **{k: v for k, v in overrides.items() if v is not None}}.items():
        if key not in fields:
            raise ConfigError(f"unknown {cls.__name__} key {key!r}")
        sub = _dataclass_type(cls, key)
        if sub is not None and isinstance(value, dict):
            value = build(sub, value)
        elif key.endswith("lr"):
            value = parse_lr(value, key)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from exc


def _dataclass_type(cls, key):
    default = next(f for f in dataclasses.fields(cls) if f.name == key)
    if default.default_factory is not dataclasses.MISSING:
        proto = default.default_factory()
        if dataclasses.is_dataclass(proto):
            return type(proto)
    return None


def load(cls, path=None, **overrides):
    return build(cls, read_json(path) if path else {}, **overrides)


def to_dict(obj) -> dict:
    return dataclasses.asdict(obj)
