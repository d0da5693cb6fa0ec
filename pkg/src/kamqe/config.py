"""Experiment configuration: every constant that the theory leaves free lives here."""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import KamqeError


class ConfigError(KamqeError, ValueError):
    """Invalid configuration; ``paths`` lists the offending dotted field paths."""

    def __init__(self, message, paths=()):
        super().__init__(message)
        self.paths = list(paths)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


def _increasing(v, name):
    if any(b <= a for a, b in zip(v, v[1:])):
        raise ValueError(f"{name} must be strictly increasing")
    return v


def _positive_h(v):
    if not v or any(h <= 0 for h in v):
        raise ValueError("h values must be positive")
    return v


class DiophantineConfig(_Strict):
    kappa: float = Field(1e-3, gt=0)
    tau: float = 1.5
    K_max: int = Field(30, ge=1)
    boundary_margin: float = Field(0.0, ge=0)
    # slow-torus search region in frequency space
    search_lo: tuple[float, ...] = (-1.1, -1.1)
    search_hi: tuple[float, ...] = (-0.5, 1.1)
    # complement-measure experiment
    measure_lo: tuple[float, ...] = (0.5, 0.5)
    measure_hi: tuple[float, ...] = (1.5, 1.5)
    measure_tau: float = 2.5
    measure_K_max: int = 50
    kappa_grid: tuple[float, ...] = (0.1, 0.05, 0.025, 0.0125)
    n_samples: int = Field(20000, ge=1)

    @model_validator(mode="after")
    def _boxes(self):
        for lo, hi, name in ((self.search_lo, self.search_hi, "search"), (self.measure_lo, self.measure_hi, "measure")):
            if len(lo) != len(hi) or any(a >= b for a, b in zip(lo, hi)):
                raise ValueError(f"{name}_lo must lie strictly below {name}_hi componentwise")
        return self


class KamConfig(_Strict):
    C_div: float = Field(0.05, gt=0)
    s: float = Field(1.0, gt=0)
    r: float = Field(0.0, ge=0)
    eps0: float = Field(0.1, gt=0)
    M: Optional[int] = Field(None, ge=1)
    drop_tol: float = Field(1e-14, ge=0)
    refit_tol: float = Field(1e-9, gt=0)
    eps_grid: tuple[float, ...] = (1e-3, 1e-4, 1e-5)
    t_grid: tuple[float, ...] = (1e-2, 1e-3, 1e-4)
    steps: int = Field(2, ge=1, le=2)
    box_lo: tuple[float, ...] = (-1.15, -0.83)
    box_hi: tuple[float, ...] = (-0.55, -0.23)
    K0_degree: int = Field(6, ge=1)

    @field_validator("eps_grid", "t_grid")
    @classmethod
    def _positive(cls, v):
        if not v or any(x <= 0 for x in v):
            raise ValueError("grid values must be positive")
        return v


class QuasiSettings(_Strict):
    omega_center: Optional[tuple[float, ...]] = None
    omega_radius: float = Field(0.03, gt=0)
    L: float = Field(2.0, gt=1)
    theta: Optional[tuple[int, ...]] = None
    gamma: Optional[int] = Field(None, ge=1)
    n_S: int = Field(200, ge=1)
    patch_margin: float = Field(0.05, ge=0)


class FlowSettings(_Strict):
    c_target: float = Field(0.1, gt=0)
    eps: Optional[float] = Field(None, gt=0)
    delta: Optional[float] = Field(None, gt=0)
    n_E: int = Field(5, ge=1)
    n_t: int = Field(3, ge=1)
    n_samples: int = Field(2000, ge=10)
    qe_bins: int = Field(32, ge=2)
    overlap_min: float = Field(0.5, gt=0, lt=1)
    max_bisect: int = Field(6, ge=0)
    qe_h_list: tuple[float, ...] = (0.1, 0.05, 0.025)

    _h = field_validator("qe_h_list")(classmethod(lambda cls, v: _positive_h(v)))


class ExperimentConfig(_Strict):
    model: Union[str, dict] = "REF2"
    h_list: tuple[float, ...] = (0.1, 0.07, 0.05)
    band: tuple[float, float] = (0.45, 0.55)
    t_interval: tuple[float, float] = (0.0, 0.02)
    t_points: int = Field(41, ge=2)
    diophantine: DiophantineConfig = DiophantineConfig()
    kam: KamConfig = KamConfig()
    quasi: QuasiSettings = QuasiSettings()
    flow: FlowSettings = FlowSettings()
    out: str = "out"
    seed: int = 0

    _h = field_validator("h_list")(classmethod(lambda cls, v: _positive_h(v)))

    @field_validator("band")
    @classmethod
    def _band(cls, v):
        if not v[0] < v[1]:
            raise ValueError("band requires a < b")
        return v

    @field_validator("t_interval")
    @classmethod
    def _interval(cls, v):
        return _increasing(v, "t_interval")

    def gamma(self, n):
        """Quasimode order; default ceil(3n/2) + 1."""
        return self.quasi.gamma if self.quasi.gamma is not None else math.ceil(3 * n / 2) + 1

    def t_grid(self):
        import numpy as np
        return np.linspace(self.t_interval[0], self.t_interval[1], self.t_points)


def _format(err):
    parts, paths = [], []
    for e in err.errors():
        path = ".".join(str(x) for x in e["loc"]) or "<root>"
        paths.append(path)
        parts.append(f"{path}: {e['msg']}")
    return ConfigError("invalid configuration: " + "; ".join(parts), paths)


def make_config(data=None, **overrides):
    """Validate a mapping (plus top-level overrides) into an ExperimentConfig."""
    d = dict(data or {})
    d.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig.model_validate(d)
    except ValidationError as err:
        raise _format(err) from None


def _merge(base, extra):
    out = dict(base)
    for k, v in extra.items():
        out[k] = _merge(out.get(k) or {}, v) if isinstance(v, dict) else v
    return out


def load_config(path=None, nested=None, **overrides):
    """Read a JSON config, deep-merge ``nested`` into it, then apply top-level overrides."""
    data = json.loads(Path(path).read_text()) if path else {}
    return make_config(_merge(data, nested or {}), **overrides)
