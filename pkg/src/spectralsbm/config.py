"""Flat ``key = value`` run configuration with dotted section prefixes."""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

from .model import HyperParams
from .sampler import MoveSchedule, RunConfig
from .synth import SbmSpec


class ConfigError(ValueError):
    pass


# section prefix -> dataclass whose fields it exposes
SECTIONS = {"prior": HyperParams, "run": RunConfig, "schedule": MoveSchedule, "sim": SbmSpec}

# settings that belong to no dataclass
EXTRA = {
    "sim.preset": (str, None),
    "embed.type": (str, "ase"),
    "embed.m": (int, None),
    "embed.isolated": (str, "error"),
    "graph.kind": (str, "undirected"),
    "summary.K": (int, None),
    "summary.pear": (bool, False),
}


def parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _float_list(text: str):
    return np.array([float(v) for v in text.replace(",", " ").split()])


def _converter(annotation: str):
    if "bool" in annotation:
        return parse_bool
    if "ndarray" in annotation or "tuple" in annotation:
        return _float_list
    if "int" in annotation:
        return int
    if "float" in annotation:
        return float
    return str


def _schema():
    schema = {}
    for prefix, cls in SECTIONS.items():
        for f in dataclasses.fields(cls):
            default = f.default if f.default is not dataclasses.MISSING else None
            schema[f"{prefix}.{f.name}"] = (_converter(str(f.type)), default)
    for key, (kind, default) in EXTRA.items():
        schema[key] = (parse_bool if kind is bool else kind, default)
    return schema


SCHEMA = _schema()


def convert(key: str, value):
    if key not in SCHEMA:
        raise ConfigError(f"unknown configuration key {key!r}")
    if value is None or not isinstance(value, str):
        return value
    conv = SCHEMA[key][0]
    if value.strip().lower() in ("none", ""):
        return None
    try:
        return conv(value)
    except ValueError as err:
        raise ConfigError(f"{key}: {err}") from None


def read_config(path) -> dict:
    """Parse a config file into converted values.  ``#`` starts a comment."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    out = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = convert(key, value)
    return out


def parse_assignments(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        out[key] = convert(key, value)
    return out


class Config:
    """Layered settings: defaults, then file values, then overrides."""

    def __init__(self, *layers: dict):
        self.values = {k: default for k, (_, default) in SCHEMA.items()}
        for layer in layers:
            for key, value in layer.items():
                if value is None:
                    continue
                self.values[key] = convert(key, value)

    def __getitem__(self, key):
        if key not in self.values:
            raise ConfigError(f"unknown configuration key {key!r}")
        return self.values[key]

    def section(self, prefix: str) -> dict:
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in self.values.items() if k.startswith(prefix + ".")}

    def _build(self, prefix):
        cls = SECTIONS[prefix]
        names = {f.name for f in dataclasses.fields(cls)}
        kw = {k: v for k, v in self.section(prefix).items() if v is not None and k in names}
        try:
            return cls(**kw)
        except (TypeError, ValueError) as err:
            raise ConfigError(f"{prefix}: {err}") from None

    def hyperparams(self) -> HyperParams:
        return self._build("prior")

    def run_config(self) -> RunConfig:
        return self._build("run")

    def schedule(self) -> MoveSchedule:
        return self._build("schedule")

    def sim_spec(self) -> SbmSpec:
        return self._build("sim")

    def resolved(self) -> dict:
        """JSON-ready copy of every setting."""
        out = {}
        for key, value in sorted(self.values.items()):
            if isinstance(value, np.ndarray):
                value = value.tolist()
            elif isinstance(value, tuple):
                value = list(value)
            out[key] = value
        return out
