"""Flat namespaced experiment configuration.

A config is a JSON object whose keys look like ``trainer.steps`` or
``federation.rounds``. Namespaces map onto the dataclasses that own them:

========== ===============================================
run        name and master seed
data       :class:`~bottlegan.synth.FederationConfig`
model      :class:`~bottlegan.trainer.ModelConfig`
trainer    :class:`~bottlegan.trainer.TrainConfig` (clients)
distill    :class:`~bottlegan.trainer.TrainConfig` (server)
federation :class:`~bottlegan.federation.FedConfig`
========== ===============================================
"""

from __future__ import annotations

import json
from dataclasses import asdict, fields
from pathlib import Path

from .exceptions import ConfigError
from .federation import FedConfig
from .synth import FederationConfig
from .trainer import ModelConfig, TrainConfig

SECTIONS = {
    "data": FederationConfig,
    "model": ModelConfig,
    "trainer": TrainConfig,
    "distill": TrainConfig,
    "federation": FedConfig,
}
RUN_DEFAULTS = {"run.name": "default", "run.seed": 0}


def defaults():
    flat = dict(RUN_DEFAULTS)
    for section, cls in SECTIONS.items():
        for key, value in asdict(cls()).items():
            flat[f"{section}.{key}"] = list(value) if isinstance(value, tuple) else value
    return flat


def _coerce(key, value, default):
    if isinstance(default, bool):
        if isinstance(value, str):
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return bool(value)
    if isinstance(value, str) and not isinstance(default, str):
        try:
            value = json.loads(value)
        except json.JSONDecodeError as err:
            raise ConfigError(f"{key}: cannot parse {value!r}") from err
    if isinstance(default, int) and not isinstance(value, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return [type(default[0])(v) for v in value] if default else list(value)
    if isinstance(default, str):
        return str(value)
    return value


def merge(base, overrides):
    """Return ``base`` updated with ``overrides``; unknown keys are errors."""
    out = dict(base)
    reference = defaults()
    for key, value in overrides.items():
        if key not in reference:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _coerce(key, value, reference[key])
    return out


def load(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file {path} is not valid JSON: {err}") from err
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object of flat keys")
    return merge(defaults(), data)


def dump(flat, path):
    Path(path).write_text(json.dumps(flat, indent=2, sort_keys=True) + "\n")


def section(flat, name):
    """Instantiate the dataclass of one namespace from a flat config."""
    cls = SECTIONS[name]
    kwargs = {}
    for f in fields(cls):
        value = flat[f"{name}.{f.name}"]
        kwargs[f.name] = tuple(value) if isinstance(value, list) else value
    return cls(**kwargs)


def parse_assignments(items):
    """``["a.b=1", ...]`` to a dict of raw string values."""
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"expected key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out
