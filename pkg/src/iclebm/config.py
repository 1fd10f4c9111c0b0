"""Run configuration: namespaced ``section.key = value`` files.

Each non-blank, non-comment line is ``section.key = <JSON value>``, e.g.::

    # desk-scale run
    model.num_layers = 2
    langevin.step_size = 3.16
    prior.mean_box = [-4, 4]

Unknown keys, duplicate keys and malformed values are errors that name the
key and line. Keys not given keep their built-in defaults.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .datagen import TaskPrior
from .evaluation import GridSpec
from .model import ModelConfig
from .sampler import LangevinConfig
from .trainer import TrainConfig


@dataclass(frozen=True)
class TasksConfig:
    num_tasks: int = 16
    seed: int = 0


@dataclass(frozen=True)
class EvalConfig:
    x_bounds: tuple[float, float] = (-6.0, 6.0)
    y_bounds: tuple[float, float] = (-6.0, 6.0)
    resolution: tuple[int, int] = (64, 64)
    lengths: tuple[int, ...] = (2, 8, 32)
    num_samples: int = 64
    seed: int = 0

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.x_bounds, self.y_bounds, self.resolution)


@dataclass(frozen=True)
class RunConfig:
    prior: TaskPrior = field(default_factory=TaskPrior)
    model: ModelConfig = field(default_factory=ModelConfig)
    langevin: LangevinConfig = field(default_factory=LangevinConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    tasks: TasksConfig = field(default_factory=TasksConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def train_config(self) -> TrainConfig:
        """``train`` section with the ``langevin`` section attached."""
        return replace(self.train, langevin=self.langevin)


SECTIONS = {
    "prior": TaskPrior,
    "model": ModelConfig,
    "langevin": LangevinConfig,
    "train": TrainConfig,
    "tasks": TasksConfig,
    "eval": EvalConfig,
}
# Keys whose default is None, with the type of a non-null value.
_NULLABLE = {"model.d_ff": int, "langevin.grad_clip": float}
_VARIABLE_LENGTH = {"eval.lengths"}
_SKIP = {"train.langevin"}


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None, source: str | None = None):
        where = ""
        if source is not None:
            where = f"{source}:{line}: " if line is not None else f"{source}: "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)
        self.key = key
        self.line = line


def _defaults() -> dict:
    out = {}
    for sec, cls in SECTIONS.items():
        inst = cls()
        for f in fields(cls):
            key = f"{sec}.{f.name}"
            if key not in _SKIP:
                out[key] = getattr(inst, f.name)
    return out


DEFAULTS = _defaults()


def _coerce(key: str, raw):
    default = DEFAULTS[key]
    if raw is None:
        if key in _NULLABLE:
            return None
        raise ValueError("null is not allowed")
    if default is None:
        default = _NULLABLE[key](0)
    if isinstance(default, bool):
        if not isinstance(raw, bool):
            raise ValueError(f"expected true/false, got {raw!r}")
        return raw
    if isinstance(default, int):
        if isinstance(raw, bool) or not isinstance(raw, int):
            raise ValueError(f"expected an integer, got {raw!r}")
        return raw
    if isinstance(default, float):
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            raise ValueError(f"expected a number, got {raw!r}")
        return float(raw)
    if isinstance(default, str):
        if not isinstance(raw, str):
            raise ValueError(f"expected a string, got {raw!r}")
        return raw
    if isinstance(default, tuple):
        if not isinstance(raw, list):
            raise ValueError(f"expected a list, got {raw!r}")
        if key not in _VARIABLE_LENGTH and len(raw) != len(default):
            raise ValueError(f"expected a list of {len(default)} values, got {len(raw)}")
        elem = type(default[0]) if default else float
        return tuple(_coerce_elem(elem, v) for v in raw)
    raise ValueError(f"unsupported type for {key}")


def _coerce_elem(elem, v):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ValueError(f"expected numeric list entries, got {v!r}")
    if elem is int:
        if not isinstance(v, int):
            raise ValueError(f"expected integer list entries, got {v!r}")
        return v
    return float(v)


def parse_value(key: str, text: str, line: int | None = None, source: str | None = None):
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}", key, line, source)
    text = text.strip()
    if not text:
        raise ConfigError(f"missing value for key {key!r}", key, line, source)
    try:
        raw = json.loads(text)
    except json.JSONDecodeError:
        # bare words are accepted as strings
        raw = text
    try:
        return _coerce(key, raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {exc}", key, line, source) from None


class ConfigLayer(dict):
    """``{key: value}`` plus the source line of each key."""

    def __init__(self, *args, lines=None, **kwargs):
        super().__init__(*args, **kwargs)
        self.lines = dict(lines or {})


def parse_config_text(text: str, source: str | None = None) -> ConfigLayer:
    out = ConfigLayer()
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"expected 'key = value', got {stripped!r}", None, lineno, source)
        key, value = (s.strip() for s in stripped.split("=", 1))
        if key in out:
            raise ConfigError(f"duplicate key {key!r} (first set on line {out.lines[key]})", key, lineno, source)
        out[key] = parse_value(key, value, lineno, source)
        out.lines[key] = lineno
    return out


def load_config_file(path) -> ConfigLayer:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", source=str(path)) from None
    return parse_config_text(text, str(path))


def build_config(*layers: dict) -> RunConfig:
    """Merge ``{key: value}`` layers over the defaults; later layers win."""
    merged, lines = {}, {}
    for layer in layers:
        for key, val in layer.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}", key)
            merged[key] = val
            lines.pop(key, None)
            if key in getattr(layer, "lines", {}):
                lines[key] = layer.lines[key]
    kwargs = {}
    for sec, cls in SECTIONS.items():
        sec_kw = {k.split(".", 1)[1]: v for k, v in merged.items() if k.startswith(sec + ".")}
        try:
            kwargs[sec] = cls(**sec_kw)
        except ValueError as exc:
            bad = [k for k in merged if k.startswith(sec + ".")]
            key = bad[0] if len(bad) == 1 else None
            label = f"{key!r}" if key else f"[{sec}] settings"
            raise ConfigError(f"invalid {label}: {exc}", key, lines.get(key)) from None
    cfg = RunConfig(**kwargs)
    if cfg.prior.dim != cfg.model.input_dim:
        raise ConfigError(f"prior.dim={cfg.prior.dim} must equal model.input_dim={cfg.model.input_dim}", "prior.dim")
    if cfg.train.seq_len > cfg.model.max_seq_len:
        raise ConfigError(
            f"train.seq_len={cfg.train.seq_len} exceeds model.max_seq_len={cfg.model.max_seq_len}", "train.seq_len"
        )
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    out = {}
    for sec in SECTIONS:
        inst = getattr(cfg, sec)
        for f in fields(inst):
            key = f"{sec}.{f.name}"
            if key in _SKIP:
                continue
            val = getattr(inst, f.name)
            out[key] = list(val) if isinstance(val, tuple) else val
    return out


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {json.dumps(v)}\n" for k, v in config_to_dict(cfg).items())
