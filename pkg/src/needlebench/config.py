"""Run configuration: one YAML file, dotted overrides, dataclass builders.

The default config is generated from the dataclass defaults themselves, so
the file format always enumerates every valid key; overrides ("a.b.c=v")
may only touch keys that exist, which catches typos before a long run.
"""

from __future__ import annotations

import copy
import dataclasses
from pathlib import Path
from typing import Any

import yaml

from .campaign import SuiteConfig, TrackingAblationConfig
from .datasets import DemoConfig, SampleConfig, TrackingDataConfig
from .encoder import EncoderConfig
from .head import CdfConfig
from .pipeline import PipelineConfig
from .policy import CloneConfig
from .tensor import ConfigError
from .training import Stage1Config

SECTIONS: dict[str, type] = {
    "data": TrackingDataConfig,
    "sample": SampleConfig,
    "stage1": Stage1Config,
    "encoder": EncoderConfig,
    "head": CdfConfig,
    "demos": DemoConfig,
    "clone": CloneConfig,
    "pipeline": PipelineConfig,
    "suite": SuiteConfig,
    "ablation": TrackingAblationConfig,
}

# free-form sections without a backing dataclass
EXTRA_DEFAULTS: dict[str, dict] = {
    "run": {"dir": "runs/default"},
    "policy": {"hidden": 64, "stop_threshold": 0.5, "seed": 0},
    "gateway": {"host": "127.0.0.1", "port": 8765, "frame_stride": 1,
                "debug_gt": False, "speed": 1.0, "static": ""},
}


def _plain(value: Any) -> Any:
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def default_config() -> dict:
    cfg = {name: _plain(dataclasses.asdict(cls())) for name, cls in SECTIONS.items()}
    cfg.update(copy.deepcopy(EXTRA_DEFAULTS))
    return cfg


def _merge(base: dict, extra: dict, path: str = "") -> None:
    for key, value in extra.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {here!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{here!r} must be a mapping")
            _merge(base[key], value, here)
        else:
            base[key] = value


def apply_override(cfg: dict, spec: str) -> None:
    """Apply one "a.b.c=value" override; the value is parsed as YAML."""
    if "=" not in spec:
        raise ConfigError(f"override {spec!r} is not of the form key=value")
    key, _, raw = spec.partition("=")
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node = node[p]
    leaf = parts[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[leaf] = yaml.safe_load(raw)


def load_config(path: str | Path | None = None,
                overrides: tuple[str, ...] = ()) -> dict:
    cfg = default_config()
    if path is not None:
        text = Path(path).read_text()
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"config root must be a mapping, got {type(data).__name__}")
        _merge(cfg, data)
    for spec in overrides:
        apply_override(cfg, spec)
    return cfg


def save_config(cfg: dict, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg, sort_keys=False))


def _coerce(default: Any, value: Any, where: str) -> Any:
    if isinstance(default, bool) or isinstance(value, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{where} must be a boolean, got {value!r}")
    if isinstance(default, float) and isinstance(value, (int, str)):
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"{where} must be a number, got {value!r}") from None
    if isinstance(default, int) and isinstance(value, str):
        try:
            return int(value)
        except ValueError:
            raise ConfigError(f"{where} must be an integer, got {value!r}") from None
    return value


def from_mapping(cls: type, mapping: dict, section: str = ""):
    """Build a config dataclass from a plain mapping, strictly."""
    section = section or cls.__name__
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(mapping) - names
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {sorted(unknown)}")
    defaults = cls()
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in mapping:
            continue
        value = mapping[f.name]
        default = getattr(defaults, f.name)
        if dataclasses.is_dataclass(default):
            if not isinstance(value, dict):
                raise ConfigError(f"{section}.{f.name} must be a mapping")
            value = from_mapping(type(default), value, f"{section}.{f.name}")
        elif isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        else:
            value = _coerce(default, value, f"{section}.{f.name}")
        kwargs[f.name] = value
    return cls(**kwargs)


def build(cfg: dict, section: str):
    if section not in SECTIONS:
        raise ConfigError(f"no dataclass-backed section {section!r}")
    return from_mapping(SECTIONS[section], cfg.get(section, {}), section)
