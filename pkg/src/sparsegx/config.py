"""Prior hyperparameters, MCMC control settings and the run configuration file."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np
import tomli_w

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class ConfigError(ValueError):
    """Configuration file or values are invalid."""


@dataclass(frozen=True)
class HyperParameters:
    """Prior constants of the sparse regression model.

    ``r`` and ``s`` are the mean and precision of the beta prior on each
    column base rate; ``m`` and ``a`` the mean and precision of the beta
    component for nonzero inclusion probabilities; ``b`` and ``tau1`` the
    intercept prior mean and variance. Effect and residual precisions have
    gamma priors with the given shape and rate.
    """

    r: float = 0.001
    s: float = 20.0
    m: float = 0.9
    a: float = 10.0
    b: float = 8.0
    tau1: float = 100.0
    tau_shape: float = 2.5
    tau_rate: float = 0.5
    psi_shape: float = 12.5
    psi_rate: float = 0.05

    @property
    def tau_prior_mean(self) -> float:
        """Prior mean of an effect variance (inverse-gamma mean)."""
        if self.tau_shape <= 1:
            return self.tau_rate / self.tau_shape
        return self.tau_rate / (self.tau_shape - 1.0)


def default_hyperparameters() -> HyperParameters:
    return HyperParameters()


# fixed-parameter overrides: None (free), a scalar applied everywhere, or a
# sequence where NaN marks a free entry
Override = Optional[object]


@dataclass(frozen=True)
class McmcControl:
    burn_in: int = 10_000
    samples: int = 100_000
    thin: int = 1
    seed: int = 0
    fixed_tau: Override = None
    fixed_psi: Override = None
    fixed_rho: Override = None
    fixed_pi: Override = None
    # draw each indicator with its inclusion probability integrated out
    marginalize_pi: bool = True

    def __post_init__(self):
        for name in ("fixed_tau", "fixed_psi", "fixed_rho", "fixed_pi"):
            v = getattr(self, name)
            if v is not None and not np.isscalar(v):
                object.__setattr__(self, name, _freeze(v))

    @property
    def saved_draws(self) -> int:
        return self.samples // self.thin


def _freeze(v):
    arr = np.asarray(v, dtype=float)
    if arr.ndim == 1:
        return tuple(float(x) for x in arr)
    return tuple(tuple(float(x) for x in row) for row in arr)


@dataclass(frozen=True)
class EvolutionControl:
    gene_inclusion_threshold: float = 0.75
    factor_gene_threshold: float = 0.75
    factor_gene_count: int = 5
    max_genes: int = 150
    max_factors: int = 10
    stage_burn_in: int = 2000
    stage_samples: int = 8000
    max_admit_per_stage: int = 25


@dataclass(frozen=True)
class FactorOptions:
    """Settings of the latent factor score distribution."""

    dirichlet_process: bool = True
    truncation: Optional[int] = None  # default min(n, 50)
    alpha_shape: float = 1.0
    alpha_rate: float = 1.0


@dataclass(frozen=True)
class DatasetOptions:
    filter: bool = True
    min_range: float = 0.25
    min_median: float = 5.0
    num_pcs: int = 5
    coding: str = "cell"


@dataclass(frozen=True)
class Config:
    hyperparameters: HyperParameters = field(default_factory=HyperParameters)
    mcmc: McmcControl = field(default_factory=McmcControl)
    evolution: EvolutionControl = field(default_factory=EvolutionControl)
    factor: FactorOptions = field(default_factory=FactorOptions)
    dataset: DatasetOptions = field(default_factory=DatasetOptions)


def _in_open_unit(x):
    return 0.0 < x < 1.0


def validate(h: HyperParameters, c: McmcControl | None = None,
             ec: EvolutionControl | None = None) -> list:
    """Return a list of invariant violations; an empty list means valid."""
    v = []
    if not _in_open_unit(h.r):
        v.append(f"r = {h.r}: r ∉ (0,1)")
    if not h.s > 0:
        v.append(f"s = {h.s}: s must be > 0")
    if not _in_open_unit(h.m):
        v.append(f"m = {h.m}: m ∉ (0,1)")
    if not h.a > 0:
        v.append(f"a = {h.a}: a must be > 0")
    if not h.tau1 > 0:
        v.append(f"tau1 = {h.tau1}: tau1 must be > 0")
    if not math.isfinite(h.b):
        v.append(f"b = {h.b}: b must be finite")
    for name in ("tau_shape", "tau_rate", "psi_shape", "psi_rate"):
        if not getattr(h, name) > 0:
            v.append(f"{name} = {getattr(h, name)}: {name} must be > 0")
    if c is not None:
        if c.burn_in < 0:
            v.append(f"burn_in = {c.burn_in}: burn_in ≥ 0 required")
        if c.samples < 1:
            v.append(f"samples = {c.samples}: samples ≥ 1 required")
        if c.thin < 1:
            v.append(f"thin = {c.thin}: thin ≥ 1 required")
        elif c.samples >= 1 and c.samples < c.thin:
            v.append(f"thin = {c.thin}: thinning leaves no saved draws from {c.samples} samples")
        if not 0 <= c.seed < 2 ** 64:
            v.append(f"seed = {c.seed}: seed must be a 64-bit unsigned integer")
        for name, lo, hi in (("fixed_tau", 0, np.inf), ("fixed_psi", 0, np.inf),
                             ("fixed_rho", 0, 1), ("fixed_pi", -1e-300, 1 + 1e-300)):
            val = getattr(c, name)
            if val is None:
                continue
            arr = np.asarray(val, dtype=float)
            arr = arr[~np.isnan(arr)]
            if name == "fixed_pi":
                bad = (arr < 0) | (arr > 1)
            else:
                bad = (arr <= lo) | (arr >= hi)
            if bad.any():
                v.append(f"{name}: values outside the parameter's support")
    if ec is not None:
        for name in ("gene_inclusion_threshold", "factor_gene_threshold"):
            if not _in_open_unit(getattr(ec, name)):
                v.append(f"{name} = {getattr(ec, name)}: {name} ∉ (0,1)")
        for name in ("factor_gene_count", "max_genes", "max_factors",
                     "stage_samples", "max_admit_per_stage"):
            if getattr(ec, name) < 1:
                v.append(f"{name} = {getattr(ec, name)}: {name} ≥ 1 required")
        if ec.stage_burn_in < 0:
            v.append(f"stage_burn_in = {ec.stage_burn_in}: stage_burn_in ≥ 0 required")
    return v


# --------------------------------------------------------------------------
# structured-text (TOML) configuration

_SECTIONS = {
    "hyperparameters": HyperParameters,
    "mcmc": McmcControl,
    "evolution": EvolutionControl,
    "factor": FactorOptions,
    "dataset": DatasetOptions,
}
_FIXED_KEYS = {"tau": "fixed_tau", "psi": "fixed_psi", "rho": "fixed_rho", "pi": "fixed_pi"}


def _coerce(cls, name, value, where):
    ftype = {f.name: f for f in fields(cls)}[name]
    default = ftype.default
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}.{name}: expected a boolean")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{where}.{name}: expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}.{name}: expected a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}.{name}: expected a string")
        return value
    return value


def config_from_dict(data: dict) -> Config:
    parts = {}
    for section, body in data.items():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown configuration section {section!r}")
        if not isinstance(body, dict):
            raise ConfigError(f"section {section!r} must be a table")
        cls = _SECTIONS[section]
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in body.items():
            if section == "mcmc" and key == "fixed":
                if not isinstance(value, dict):
                    raise ConfigError("mcmc.fixed must be a table")
                for fk, fv in value.items():
                    if fk not in _FIXED_KEYS:
                        raise ConfigError(f"unknown key mcmc.fixed.{fk}")
                    kwargs[_FIXED_KEYS[fk]] = fv if isinstance(fv, (int, float)) else _freeze(
                        [math.nan if x == "free" else x for x in fv] if fv and not isinstance(fv[0], list)
                        else [[math.nan if x == "free" else x for x in row] for row in fv])
                continue
            if key not in known or key.startswith("fixed_"):
                raise ConfigError(f"unknown key {section}.{key}")
            if key == "truncation":
                if value is not None and (not isinstance(value, int) or value < 1):
                    raise ConfigError("factor.truncation: expected a positive integer")
                kwargs[key] = value
                continue
            kwargs[key] = _coerce(cls, key, value, section)
        parts[section] = cls(**kwargs)
    return Config(**parts)


def load_config(path) -> Config:
    with open(path, "rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(data)


def config_to_dict(cfg: Config) -> dict:
    out = {}
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        body = {}
        for f in fields(obj):
            value = getattr(obj, f.name)
            if f.name.startswith("fixed_"):
                continue
            if value is None:
                continue
            body[f.name] = value
        if section == "mcmc":
            fixed = {}
            for short, long in _FIXED_KEYS.items():
                val = getattr(obj, long)
                if val is None:
                    continue
                if isinstance(val, tuple):
                    val = [["free" if math.isnan(x) else x for x in row] if isinstance(row, tuple)
                           else ("free" if math.isnan(row) else row) for row in val]
                fixed[short] = val
            if fixed:
                body["fixed"] = fixed
        out[section] = body
    return out


def dumps_config(cfg: Config) -> str:
    return tomli_w.dumps(config_to_dict(cfg))


def loads_config(text: str) -> Config:
    try:
        return config_from_dict(tomllib.loads(text))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(str(exc)) from None


def replace(obj, **changes):
    return dataclasses.replace(obj, **changes)
