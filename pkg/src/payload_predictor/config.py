"""Flat ``section.key = value`` configuration files.

Sections map onto the package dataclasses::

    sim.m_p = 0.26          # PlantParams
    ref.kind = lemniscate   # RefParams
    train.epochs = 200      # TrainConfig
    mpc.N = 20              # MpcConfig
    run.duration = 20       # closed-loop / simulation settings

Unknown sections or keys raise ``ConfigError``.
"""
from __future__ import annotations

import ast
import dataclasses
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError
from .mpc import MpcConfig
from .sim import PlantParams, RefParams
from .trainer import TrainConfig


@dataclass
class RunConfig:
    duration: float = 20.0
    rate: float = 50.0
    controller: str = "nominal"
    refit: bool = True
    step_times: tuple = ()  # payload mass changes during the flight
    step_masses: tuple = ()
    threshold: float = 0.4  # minimum relative error reduction for `compare --check`
    derivatives: str = "auto"


@dataclass
class Config:
    sim: PlantParams = field(default_factory=PlantParams)
    ref: RefParams = field(default_factory=RefParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    mpc: MpcConfig = field(default_factory=MpcConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def ref_params(self, kind=None):
        """Reference parameters consistent with the nominal vehicle."""
        nom = self.sim.nominal()
        rp = replace(self.ref, m=nom.m, J=nom.J, g=nom.g)
        return replace(rp, kind=kind) if kind else rp


SECTIONS = ("sim", "ref", "train", "mpc", "run")


def _parse_value(text):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        low = text.lower()
        if low in ("true", "false"):
            return low == "true"
        return text


def _coerce(current, value, key):
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(current, np.ndarray):
        try:
            arr = np.asarray(value, dtype=float)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected numbers, got {value!r}") from None
        if arr.size == current.size and arr.shape != current.shape:
            arr = arr.reshape(current.shape)
        elif arr.ndim == 1 and current.ndim == 2 and arr.size == current.shape[0]:
            arr = np.diag(arr)
        if arr.shape != current.shape:
            raise ConfigError(f"{key}: expected shape {current.shape}, got {arr.shape}")
        return arr
    if isinstance(current, (int, float)) and not isinstance(current, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        if isinstance(current, int) and not float(value).is_integer():
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return type(current)(value)
    if isinstance(current, tuple):
        if not isinstance(value, (tuple, list)):
            raise ConfigError(f"{key}: expected a tuple, got {value!r}")
        return tuple(value)
    if current is None or isinstance(value, type(current)):
        return value
    raise ConfigError(f"{key}: expected {type(current).__name__}, got {value!r}")


def parse_config_text(text, base: Config | None = None) -> Config:
    """Parse config text on top of ``base`` (defaults when omitted)."""
    items = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        items.append((key, _parse_value(value), f"line {lineno}: "))
    return _apply(base or Config(), items)


def apply_overrides(cfg: Config, updates) -> Config:
    """Apply a ``{"section.key": value}`` mapping."""
    return _apply(cfg, [(k, v, "") for k, v in updates.items()])


def _apply(cfg, items):
    parts = {s: {} for s in SECTIONS}
    for key, value, where in items:
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"{where}unknown key {key!r}")
        obj = getattr(cfg, section)
        if name not in {f.name for f in dataclasses.fields(obj)}:
            raise ConfigError(f"{where}unknown key {key!r}")
        current = getattr(obj, name)
        if section == "mpc" and name in ("u_min", "u_max") and current is None:
            current = np.zeros(4)
        parts[section][name] = _coerce(current, value, key)
    mpc = parts["mpc"]
    if "Q" in mpc and "P" not in mpc:
        mpc["P"] = None  # terminal weight follows Q
    out = replace(cfg, **{s: replace(getattr(cfg, s), **kv) for s, kv in parts.items() if kv})
    if len(out.run.step_times) != len(out.run.step_masses):
        raise ConfigError("run.step_times and run.step_masses differ in length")
    try:
        out.train.validate()
        out.mpc.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return out


def load_config(path=None, overrides=()) -> Config:
    """Config from an optional file plus ``key=value`` override strings."""
    cfg = Config()
    if path:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        cfg = parse_config_text(text, cfg)
    items = []
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = (s.strip() for s in item.split("=", 1))
        items.append((k, _parse_value(v), "override: "))
    return _apply(cfg, items) if items else cfg
