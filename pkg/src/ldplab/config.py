"""Experiment configuration read from TOML into typed dataclasses.

Every table maps onto a dataclass; unknown keys and wrong shapes raise
ConfigError with the dotted key path. The model table mirrors ModelSpec.
"""
from __future__ import annotations

import dataclasses
import sys
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .model import (EnvCoupling, EnvironmentSpec, InitialSpec, KernelSpec, ModelError, ModelSpec, PotentialSpec,
                    Profile, SpatialKernel, TorusLattice)

EXPERIMENTS = ("simulate", "mvpde", "rate", "girsanov", "varadhan", "convergence")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Numerics:
    steps: int = 200
    theta_max: float = 6.0
    n_theta: int = 256
    nx: int = 8
    env_order: int = 3
    pde_steps: int = 256
    k_theta: int = 8
    k_x: int | None = None
    k_w: int | None = None
    interaction: str = "auto"


@dataclass(frozen=True)
class RunSettings:
    seed: int = 0
    replicas: int = 1
    replica_offset: int = 0
    threads: int = 1
    sites_ladder: tuple[int, ...] = (32, 128, 512)
    ladder_replicas: int = 8


@dataclass(frozen=True)
class RateSettings:
    flow: str = "mckean_vlasov"  # or "gaussian"
    mean_slope: float = 1.0
    mean_amplitude: float = 0.5
    s2_points: int = 4
    control_shift: float = 0.0


@dataclass(frozen=True)
class GirsanovSettings:
    replicas: int = 10000
    clip: float = 1.0
    kappas: tuple[float, ...] = (0.0, 0.25, 0.75, 1.3)
    moment_replicas: int = 640


@dataclass(frozen=True)
class VaradhanSettings:
    p: float = 0.8
    alpha: float = 0.1
    sizes: tuple[int, ...] = (50, 100, 200, 400)
    radii: tuple[float, ...] = (2, 4, 8, 16)
    eps: float = 0.01
    gamma: float = 2.0


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    model: ModelSpec = field(default_factory=lambda: default_model())
    numerics: Numerics = field(default_factory=Numerics)
    run: RunSettings = field(default_factory=RunSettings)
    rate: RateSettings = field(default_factory=RateSettings)
    girsanov: GirsanovSettings = field(default_factory=GirsanovSettings)
    varadhan: VaradhanSettings = field(default_factory=VaradhanSettings)


def default_model() -> ModelSpec:
    return ModelSpec(
        TorusLattice(1, 32), PotentialSpec((0.0, 0.0, 0.5)), KernelSpec.zero(), EnvironmentSpec.point_mass(0.0),
        InitialSpec("gaussian", Profile("constant", 0.0), 0.25), 1.0, 1.0,
    )


def _is_dataclass_type(tp) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def _convert(value, tp, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if _is_dataclass_type(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a table")
        return build(tp, value, path)
    if origin in (typing.Union, types.UnionType):
        if value is None:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(value, inner[0], path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected an array")
        item = args[0] if args else Any
        return tuple(_convert(v, item, f"{path}[{i}]") for i, v in enumerate(value))
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true or false")
        return value
    return value


def build(cls, table: dict, path: str = ""):
    """Instantiate a dataclass from a dict, rejecting unknown keys."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init and not f.name.startswith("_")}
    unknown = sorted(set(table) - names)
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown key {where}{unknown[0]}")
    kwargs = {k: _convert(v, hints[k], f"{path}.{k}" if path else k) for k, v in table.items()}
    try:
        return cls(**kwargs)
    except ModelError as exc:
        raise ConfigError(f"{path or cls.__name__}: {exc}") from exc
    except TypeError as exc:
        raise ConfigError(f"{path or cls.__name__}: {exc}") from exc


def parse(table: dict) -> ExperimentConfig:
    if "experiment" not in table:
        raise ConfigError("missing key experiment")
    cfg = build(ExperimentConfig, table)
    if cfg.experiment not in EXPERIMENTS:
        raise ConfigError(f"experiment: unknown experiment {cfg.experiment!r}")
    if cfg.rate.flow not in ("mckean_vlasov", "gaussian"):
        raise ConfigError(f"rate.flow: unknown flow {cfg.rate.flow!r}")
    return cfg


def load(path: str | Path) -> ExperimentConfig:
    with open(path, "rb") as fh:
        try:
            table = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return parse(table)


def resolved(cfg: ExperimentConfig) -> dict:
    """Plain-data snapshot of a configuration, without execution-only settings."""
    out = dataclasses.asdict(cfg)
    out["run"].pop("threads", None)
    return out
