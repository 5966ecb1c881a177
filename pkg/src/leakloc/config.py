"""Experiment configuration: YAML schema, presets and validation.

A config file is a YAML mapping with optional sections ``mesh``, ``time``,
``lasers``, ``truth``, ``noise``, ``regularization``, ``optimizer`` plus
top-level ``preset``, ``variant``, ``rng_seed``, ``output``,
``mitigate_inverse_crime`` and ``data_weight``.  Anything omitted falls back
to the chosen preset (``experiment1`` by default).

``data_weight: null`` means the misfit weight is chosen so that the
measure-gradient Lipschitz bound equals ``optimizer.lipschitz``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import yaml

from .adjoint import RegConfig
from .forward import NoiseSpec, PhysicalParams, SimSpec
from .measure import DiracMeasure
from .observation import LaserConfig
from .optimizer import OptConfig

VARIANTS = ("basic", "sliding")


class ConfigError(ValueError):
    """Invalid or unparsable configuration."""


@dataclass(frozen=True)
class MeshConfig:
    nx: int = 32
    ny: int = 32
    extent: tuple = (0.5, 0.5)


@dataclass(frozen=True)
class TruthConfig:
    spikes: tuple = ((0.1, 0.3, 0.08), (0.4, 0.25, 0.05), (0.25, 0.13, 0.06))
    k0: float = 0.01
    c: tuple = (0.5 * math.cos(math.radians(30)), 0.5 * math.sin(math.radians(30)))

    def measure(self) -> DiracMeasure:
        if not self.spikes:
            return DiracMeasure()
        return DiracMeasure([s[:2] for s in self.spikes], [s[2] for s in self.spikes])

    def params(self) -> PhysicalParams:
        return PhysicalParams(self.k0, self.c)


@dataclass(frozen=True)
class ExperimentConfig:
    mesh: MeshConfig = field(default_factory=MeshConfig)
    time: SimSpec = field(default_factory=SimSpec)
    lasers: LaserConfig = field(default_factory=LaserConfig)
    truth: TruthConfig = field(default_factory=TruthConfig)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    regularization: RegConfig = field(default_factory=RegConfig)
    optimizer: OptConfig = field(default_factory=OptConfig)
    variant: str = "sliding"
    rng_seed: int = 0
    output: str = "out"
    mitigate_inverse_crime: bool = True
    data_weight: float | None = None


PRESETS = {
    "experiment1": ExperimentConfig(),
    "experiment2": ExperimentConfig(
        truth=TruthConfig(
            spikes=((0.2, 0.3, 0.15), (0.4, 0.1, 0.04)),
            k0=0.02,
            c=(0.1 * math.cos(math.radians(120)), 0.1 * math.sin(math.radians(120))),
        ),
    ),
}


# -- scalar converters -------------------------------------------------------

def _num(name, v, kind=float):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{name}: expected a number, got {v!r}")
    if kind is int:
        if float(v) != int(v):
            raise ConfigError(f"{name}: expected an integer, got {v!r}")
        return int(v)
    v = float(v)
    if not math.isfinite(v):
        raise ConfigError(f"{name}: must be finite")
    return v


def _float(name, v):
    return _num(name, v)


def _int(name, v):
    return _num(name, v, int)


def _opt_float(name, v):
    return None if v is None else _num(name, v)


def _bool(name, v):
    if not isinstance(v, bool):
        raise ConfigError(f"{name}: expected true/false, got {v!r}")
    return v


def _vec(n):
    def conv(name, v):
        if not isinstance(v, (list, tuple)) or len(v) != n:
            raise ConfigError(f"{name}: expected a list of {n} numbers, got {v!r}")
        return tuple(_num(f"{name}[{i}]", x) for i, x in enumerate(v))
    return conv


def _list_of(conv_item):
    def conv(name, v):
        if not isinstance(v, (list, tuple)):
            raise ConfigError(f"{name}: expected a list, got {v!r}")
        return tuple(conv_item(f"{name}[{i}]", x) for i, x in enumerate(v))
    return conv


def _str(name, v):
    if not isinstance(v, str):
        raise ConfigError(f"{name}: expected a string, got {v!r}")
    return v


_SCHEMA = {
    "mesh": (MeshConfig, {"nx": _int, "ny": _int, "extent": _vec(2)}),
    "time": (SimSpec, {"T": _float, "n_t": _int, "cfl_safety": _float}),
    "lasers": (LaserConfig, {"sources": _list_of(_vec(2)), "mirrors_per_edge": _int, "n_seg": _int}),
    "truth": (TruthConfig, {"spikes": _list_of(_vec(3)), "k0": _float, "c": _vec(2)}),
    "noise": (NoiseSpec, {"data": _float, "k": _float, "c": _float}),
    "regularization": (RegConfig, {"alpha": _float, "k_weight": _float, "c_weight": _float,
                                   "k_box": _vec(2), "c_box": _vec(2)}),
    "optimizer": (OptConfig, {
        "tau": _opt_float, "lipschitz": _opt_float, "tau_factor": _float, "sigma": _opt_float,
        "sigma_factor": _float, "sigma_period": _int, "sigma_safeguard": _bool, "theta": _float,
        "eps0": _float, "merge_radius": _float, "merge_period": _int, "merge_tol_factor": _float,
        "merge_tol_decay": _float, "max_outer": _int, "slide_shrink": _float, "slide_max_tries": _int,
        "weight_floor": _float, "inner_max_sweeps": _int, "fix_kc": _bool,
    }),
}
_TOP = {"variant": _str, "rng_seed": _int, "output": _str, "mitigate_inverse_crime": _bool,
        "data_weight": _opt_float}


def from_dict(data: dict | None) -> ExperimentConfig:
    """Build and validate a config from a parsed mapping."""
    data = {} if data is None else data
    if not isinstance(data, dict):
        raise ConfigError(f"top level: expected a mapping, got {type(data).__name__}")
    data = dict(data)
    preset = data.pop("preset", "experiment1")
    if preset not in PRESETS:
        raise ConfigError(f"preset: unknown preset {preset!r} (choose from {sorted(PRESETS)})")
    cfg = PRESETS[preset]
    updates = {}
    for key, value in data.items():
        if key in _SCHEMA:
            cls, conv = _SCHEMA[key]
            if value is None:
                continue
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: expected a mapping")
            unknown = set(value) - set(conv)
            if unknown:
                raise ConfigError(f"{key}.{sorted(unknown)[0]}: unknown field")
            vals = {k: conv[k](f"{key}.{k}", v) for k, v in value.items()}
            updates[key] = replace(getattr(cfg, key), **vals)
        elif key in _TOP:
            updates[key] = _TOP[key](key, value)
        else:
            raise ConfigError(f"{key}: unknown field")
    cfg = replace(cfg, **updates)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    m = cfg.mesh
    if m.nx < 2 or m.ny < 2:
        raise ConfigError("mesh.nx: node counts must be >= 2")
    if min(m.extent) <= 0:
        raise ConfigError("mesh.extent: side lengths must be positive")
    t = cfg.time
    if t.T <= 0:
        raise ConfigError("time.T: must be positive")
    if t.n_t < 1:
        raise ConfigError("time.n_t: must be >= 1")
    if not 0 < t.cfl_safety <= 1:
        raise ConfigError("time.cfl_safety: must lie in (0, 1]")
    las = cfg.lasers
    if not las.sources:
        raise ConfigError("lasers.sources: need at least one laser")
    for i, s in enumerate(las.sources):
        if not (0 < s[0] < m.extent[0] and 0 < s[1] < m.extent[1]):
            raise ConfigError(f"lasers.sources[{i}]: must lie strictly inside the domain")
    if las.mirrors_per_edge < 1:
        raise ConfigError("lasers.mirrors_per_edge: must be >= 1")
    if las.n_seg < 1:
        raise ConfigError("lasers.n_seg: must be >= 1")
    reg = cfg.regularization
    for i, (x, y, r) in enumerate(cfg.truth.spikes):
        if r < 0:
            raise ConfigError(f"truth.spikes[{i}]: rate must be >= 0")
        if not (0 <= x <= m.extent[0] and 0 <= y <= m.extent[1]):
            raise ConfigError(f"truth.spikes[{i}]: location outside the domain")
    if cfg.truth.k0 <= 0:
        raise ConfigError("truth.k0: must be positive")
    for name in ("data", "k", "c"):
        if getattr(cfg.noise, name) < 0:
            raise ConfigError(f"noise.{name}: must be >= 0")
    if reg.alpha <= 0:
        raise ConfigError("regularization.alpha: must be positive")
    if reg.k_weight < 0 or reg.c_weight < 0:
        raise ConfigError("regularization.k_weight: weights must be >= 0")
    for name in ("k_box", "c_box"):
        lo, hi = getattr(reg, name)
        if lo > hi:
            raise ConfigError(f"regularization.{name}: lower bound exceeds upper bound")
    if reg.k_box[0] <= 0:
        raise ConfigError("regularization.k_box: lower bound must be positive")
    o = cfg.optimizer
    for name in ("tau", "lipschitz", "sigma"):
        v = getattr(o, name)
        if v is not None and v <= 0:
            raise ConfigError(f"optimizer.{name}: must be positive")
    for name in ("theta", "eps0", "tau_factor", "sigma_factor"):
        if getattr(o, name) <= 0:
            raise ConfigError(f"optimizer.{name}: must be positive")
    if o.max_outer < 0:
        raise ConfigError("optimizer.max_outer: must be >= 0")
    if not 0 < o.slide_shrink < 1:
        raise ConfigError("optimizer.slide_shrink: must lie in (0, 1)")
    if not 0 < o.merge_tol_decay <= 1:
        raise ConfigError("optimizer.merge_tol_decay: must lie in (0, 1]")
    for name in ("merge_radius", "merge_tol_factor", "weight_floor"):
        if getattr(o, name) < 0:
            raise ConfigError(f"optimizer.{name}: must be >= 0")
    for name in ("merge_period", "slide_max_tries", "sigma_period", "inner_max_sweeps"):
        if getattr(o, name) < 0:
            raise ConfigError(f"optimizer.{name}: must be >= 0")
    if cfg.variant not in VARIANTS:
        raise ConfigError(f"variant: expected one of {VARIANTS}, got {cfg.variant!r}")
    if cfg.data_weight is not None and cfg.data_weight <= 0:
        raise ConfigError("data_weight: must be positive")


def loads(text: str) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
        raise ConfigError(f"parse error at {where}: {exc.problem or exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"parse error: {exc}") from exc
    return from_dict(data)


def load_config(path) -> ExperimentConfig:
    """Read a YAML config file; a preset name like ``experiment2`` also works."""
    if str(path) in PRESETS:
        return PRESETS[str(path)]
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return loads(text)


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    return v


def to_dict(cfg: ExperimentConfig) -> dict:
    """Full mapping with every field spelled out; inverse of :func:`from_dict`."""
    out = {}
    for key in _SCHEMA:
        sec = getattr(cfg, key)
        out[key] = {f.name: _plain(getattr(sec, f.name)) for f in fields(sec)}
    for key in _TOP:
        out[key] = getattr(cfg, key)
    return out


def dumps(cfg: ExperimentConfig) -> str:
    # PyYAML writes floats with repr, so values round-trip exactly
    return yaml.safe_dump(to_dict(cfg), sort_keys=False, default_flow_style=False)
