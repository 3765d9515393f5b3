"""INI config parsing, canonical serialization, and hashing.

Files are plain INI: ``[section]`` headers, ``key = value`` pairs, ``#``
comments. Every key is optional and falls back to its default, but unknown
sections or keys are hard errors so typos never silently change a run.
``serialize_config`` emits a canonical form (fixed section and key order)
whose sha256 is the config hash recorded in run logs; parse and serialize
round-trip exactly.

The ``CLB_SEED`` environment variable, when set, overrides the master seed
from the file at parse time.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import os
from dataclasses import dataclass
from fractions import Fraction

from .errors import ConfigError
from .evalproto import TrainingConfig
from .flowselect import FlowConfig
from .rehearsal import GateConfig
from .strategies import StrategyConfig
from .videodata import ProtocolConfig

SEED_ENV_VAR = "CLB_SEED"


@dataclass(frozen=True)
class DataConfig:
    dir: str = "data/clips"
    classes: int = 30
    frames: int = 16
    height: int = 64
    width: int = 64
    channels: int = 3

    def __post_init__(self):
        if self.classes < 1:
            raise ConfigError("classes must be positive")
        if self.frames < 2:
            raise ConfigError("frames must be at least 2")
        if min(self.height, self.width) < 1 or self.channels not in (1, 3):
            raise ConfigError("clip extents must be positive with 1 or 3 channels")


@dataclass(frozen=True)
class RunConfig:
    output_dir: str = "runs/out"
    workers: int = 1

    def __post_init__(self):
        if self.workers < 1:
            raise ConfigError("workers must be positive")


@dataclass(frozen=True)
class SweepConfig:
    buffers: tuple[int, ...] = (100, 200, 500)
    deltas: tuple[float | None, ...] = (None, 0.6, 0.7, 0.8)
    idd: tuple[bool, ...] = (False, True)

    def __post_init__(self):
        if not self.buffers or not self.deltas or not self.idd:
            raise ConfigError("sweep axes must be non-empty")
        if any(b < 1 for b in self.buffers):
            raise ConfigError("sweep buffer capacities must be positive")
        for d in self.deltas:
            if d is not None and not 0.0 < d < 1.0:
                raise ConfigError("sweep deltas must lie in (0, 1) or be 'off'")


@dataclass(frozen=True)
class EngineConfig:
    data: DataConfig
    protocol: ProtocolConfig
    strategy: StrategyConfig
    gate: GateConfig
    training: TrainingConfig
    run: RunConfig
    sweep: SweepConfig


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("true", "yes", "on", "1"):
        return True
    if lowered in ("false", "no", "off", "0"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


def _parse_int(raw: str) -> int:
    try:
        return int(raw.strip(), 10)
    except ValueError:
        raise ConfigError(f"expected an integer, got {raw!r}") from None


def _parse_float(raw: str) -> float:
    try:
        return float(raw.strip())
    except ValueError:
        raise ConfigError(f"expected a number, got {raw!r}") from None


def _parse_fraction(raw: str) -> Fraction:
    try:
        return Fraction(raw.strip())
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"expected a fraction like 3/10 or 0.3, got {raw!r}") from None


def _parse_str(raw: str) -> str:
    return raw.strip()


def _parse_delta(raw: str) -> float | None:
    lowered = raw.strip().lower()
    if lowered == "off":
        return None
    return _parse_float(raw)


def _parse_int_list(raw: str) -> tuple[int, ...]:
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if not parts:
        raise ConfigError("expected a comma-separated list of integers")
    return tuple(_parse_int(p) for p in parts)


def _parse_delta_list(raw: str) -> tuple[float | None, ...]:
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if not parts:
        raise ConfigError("expected a comma-separated list of thresholds")
    return tuple(_parse_delta(p) for p in parts)


def _parse_bool_list(raw: str) -> tuple[bool, ...]:
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if not parts:
        raise ConfigError("expected a comma-separated list of flags")
    return tuple(_parse_bool(p) for p in parts)


# section -> key -> (constructor kwarg, parser)
_SCHEMA: dict[str, dict[str, tuple[str, object]]] = {
    "data": {
        "dir": ("dir", _parse_str),
        "classes": ("classes", _parse_int),
        "frames": ("frames", _parse_int),
        "height": ("height", _parse_int),
        "width": ("width", _parse_int),
        "channels": ("channels", _parse_int),
    },
    "protocol": {
        "pool_size": ("pool_size", _parse_int),
        "classes_per_task": ("classes_per_task", _parse_int),
        "tasks_per_problem": ("tasks_per_problem", _parse_int),
        "experiments": ("experiments", _parse_int),
        "test_fraction": ("test_fraction", _parse_fraction),
        "clips_per_class": ("clips_per_class", _parse_int),
        "master_seed": ("master_seed", _parse_int),
    },
    "strategy": {
        "kind": ("kind", _parse_str),
        "alpha": ("alpha", _parse_float),
        "beta": ("beta", _parse_float),
        "lambda": ("ewc_lambda", _parse_float),
        "tau": ("tau", _parse_float),
        "lwf_weight": ("lwf_weight", _parse_float),
        "replay_batch": ("replay_batch", _parse_int),
        "fisher_cap": ("fisher_cap", _parse_int),
        "buffer_capacity": ("buffer_capacity", _parse_int),
    },
    "gate": {
        "cdr": ("cdr_enabled", _parse_bool),
        "delta": ("delta", _parse_float),
        "idd": ("idd_enabled", _parse_bool),
        "frame_budget": ("frame_budget", _parse_int),
        "flow_levels": ("levels", _parse_int),
        "flow_radius": ("radius", _parse_int),
        "flow_iterations": ("iterations", _parse_int),
        "flow_sigma": ("sigma", _parse_float),
    },
    "training": {
        "epochs": ("epochs", _parse_int),
        "batch_size": ("batch_size", _parse_int),
        "optimizer": ("optimizer", _parse_str),
        "learning_rate": ("learning_rate", _parse_float),
        "hidden": ("hidden", _parse_int),
        "pool": ("pool", _parse_int),
        "window": ("window", _parse_int),
        "save_checkpoints": ("save_checkpoints", _parse_bool),
        "eval_per_task": ("eval_per_task", _parse_bool),
    },
    "run": {
        "output_dir": ("output_dir", _parse_str),
        "workers": ("workers", _parse_int),
    },
    "sweep": {
        "buffers": ("buffers", _parse_int_list),
        "deltas": ("deltas", _parse_delta_list),
        "idd": ("idd", _parse_bool_list),
    },
}

_FLOW_KEYS = ("levels", "radius", "iterations", "sigma")


def parse_config_text(text: str, apply_env: bool = True) -> EngineConfig:
    parser = configparser.ConfigParser(
        interpolation=None, inline_comment_prefixes=("#",)
    )
    try:
        parser.read_string(text)
    except configparser.Error as err:
        raise ConfigError(f"malformed config: {err}") from None
    if parser.defaults():
        raise ConfigError("unknown section 'DEFAULT'")

    values: dict[str, dict[str, object]] = {name: {} for name in _SCHEMA}
    for section in parser.sections():
        schema = _SCHEMA.get(section)
        if schema is None:
            raise ConfigError(f"unknown section {section!r}")
        for key, raw in parser.items(section):
            entry = schema.get(key)
            if entry is None:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            kwarg, convert = entry
            try:
                values[section][kwarg] = convert(raw)
            except ConfigError as err:
                raise ConfigError(f"[{section}] {key}: {err}") from None

    if apply_env:
        env_seed = os.environ.get(SEED_ENV_VAR)
        if env_seed is not None and env_seed.strip():
            values["protocol"]["master_seed"] = _parse_int(env_seed)

    gate_kwargs = dict(values["gate"])
    flow_kwargs = {k: gate_kwargs.pop(k) for k in _FLOW_KEYS if k in gate_kwargs}
    try:
        gate = GateConfig(flow=FlowConfig(**flow_kwargs), **gate_kwargs)
        return EngineConfig(
            data=DataConfig(**values["data"]),
            protocol=ProtocolConfig(**values["protocol"]),
            strategy=StrategyConfig(**values["strategy"]),
            gate=gate,
            training=TrainingConfig(**values["training"]),
            run=RunConfig(**values["run"]),
            sweep=SweepConfig(**values["sweep"]),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from None


def parse_config(path: str, apply_env: bool = True) -> EngineConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as err:
        raise ConfigError(f"cannot read config {path!r}: {err}") from None
    return parse_config_text(text, apply_env=apply_env)


def _fmt(value: object) -> str:
    if value is None:
        return "off"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, Fraction):
        return str(value)
    return str(value)


def _fmt_list(values: tuple) -> str:
    return ",".join(_fmt(v) for v in values)


def serialize_config(cfg: EngineConfig) -> str:
    """Canonical INI text: fixed section/key order, one value per line."""
    gate_fields = {
        "cdr_enabled": cfg.gate.cdr_enabled,
        "delta": cfg.gate.delta,
        "idd_enabled": cfg.gate.idd_enabled,
        "frame_budget": cfg.gate.frame_budget,
        "levels": cfg.gate.flow.levels,
        "radius": cfg.gate.flow.radius,
        "iterations": cfg.gate.flow.iterations,
        "sigma": cfg.gate.flow.sigma,
    }
    sources = {
        "data": cfg.data,
        "protocol": cfg.protocol,
        "strategy": cfg.strategy,
        "training": cfg.training,
        "run": cfg.run,
        "sweep": cfg.sweep,
    }
    out = io.StringIO()
    for section, schema in _SCHEMA.items():
        out.write(f"[{section}]\n")
        for key, (kwarg, _) in schema.items():
            if section == "gate":
                value = gate_fields[kwarg]
            else:
                value = getattr(sources[section], kwarg)
            if isinstance(value, tuple):
                out.write(f"{key} = {_fmt_list(value)}\n")
            else:
                out.write(f"{key} = {_fmt(value)}\n")
        out.write("\n")
    return out.getvalue()


def config_hash(cfg: EngineConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode("utf-8")).hexdigest()
