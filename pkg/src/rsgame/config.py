"""Run configuration: a strict JSON schema and its translation to model objects.

Regimes are numbered from 1 in configuration files (``initial_state: 1``
is the first regime); the Python API numbers them from 0.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .bancassurance import BancassuranceParams, TimeTable
from .chain import validate_generator
from .errors import ConfigError, ModelValidationError
from .jumpdiff import LevyMeasureSpec, MarkLaw

Matrix = list[list[float]]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", strict=True)


class MatrixPiece(_Strict):
    start: float
    matrix: Matrix


class PiecewiseMatrix(_Strict):
    pieces: list[MatrixPiece] = Field(min_length=1)


class ValuePiece(_Strict):
    start: float
    values: Union[float, list[float]]


class PiecewiseValues(_Strict):
    pieces: list[ValuePiece] = Field(min_length=1)


StateValues = Union[float, list[float], PiecewiseValues]


class MarkLawConfig(_Strict):
    kind: Literal["two_point", "uniform", "lognormal"]
    params: list[float]


class JumpConfig(_Strict):
    intensity: Union[float, list[float]]
    laws: Union[MarkLawConfig, list[MarkLawConfig]]


class ModelConfig(_Strict):
    horizon: float = Field(gt=0)
    generator: Union[Matrix, PiecewiseMatrix]
    initial_state: int = Field(ge=1)
    p_tilde: Union[float, PiecewiseValues]
    a: StateValues
    sigma1: StateValues
    sigma2: StateValues
    h1: StateValues
    h2: StateValues
    gamma_claims: Union[Matrix, PiecewiseMatrix, None] = None
    jumps: Union[JumpConfig, None] = None
    kappa1: float
    kappa2: float
    r_tilde: Union[float, list[float]]
    K1: float
    K2: float
    u: float
    c: float


class SimulationConfig(_Strict):
    grid_points: int = Field(default=101, ge=64)
    n_paths: int = Field(default=10_000, ge=100)
    seed: int = Field(default=0, ge=0, lt=2**64)
    solver_grid_points: int = Field(default=2001, ge=64)


class VerificationConfig(_Strict):
    deviation_scalings: list[float] = Field(default=[0.5, 0.8, 1.25, 2.0])
    checkpoints: list[float] = Field(default=[0.2, 0.4, 0.6, 0.8])
    z_threshold: float = Field(default=3.0, gt=0)
    fo_samples: int = Field(default=100, ge=1)
    fo_tolerance: float = Field(default=1e-6, gt=0)
    multiplier_tolerance: float = Field(default=1e-10, gt=0)
    multiplier_rel_tolerance: float = Field(default=1e-6, gt=0)
    log_abs_rate: bool = False
    dividend_scale: float = Field(default=1.0, gt=0)
    rate_scale: float = Field(default=1.0, gt=0)

    @field_validator("deviation_scalings")
    @classmethod
    def _positive(cls, v):
        if any(s <= 0 for s in v):
            raise ValueError("deviation scalings must be positive")
        return v

    @field_validator("checkpoints")
    @classmethod
    def _fractions(cls, v):
        if any(not 0 < x <= 1 for x in v):
            raise ValueError("checkpoints are fractions of the horizon in (0, 1]")
        return v


class OutputConfig(_Strict):
    directory: str = "out"


class RunConfig(_Strict):
    model: ModelConfig
    simulation: SimulationConfig = SimulationConfig()
    verification: VerificationConfig = VerificationConfig()
    output: OutputConfig = OutputConfig()

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()


def _format_errors(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(x) for x in e["loc"])
        lines.append(f"{loc}: {e['msg']}")
    return "\n".join(lines)


def parse_config(text: str) -> RunConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from exc


def load_config(path: str | Path, seed: int | None = None, n_paths: int | None = None) -> RunConfig:
    """Read and validate a config file, applying command-line overrides."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    cfg = parse_config(text)
    if seed is not None or n_paths is not None:
        data = cfg.model_dump()
        if seed is not None:
            data["simulation"]["seed"] = seed
        if n_paths is not None:
            data["simulation"]["n_paths"] = n_paths
        try:
            cfg = RunConfig.model_validate(data)
        except ValidationError as exc:
            raise ConfigError(_format_errors(exc)) from exc
    return cfg


# -- translation --------------------------------------------------------------------


def _generator_raw(g):
    if isinstance(g, PiecewiseMatrix):
        return [(p.start, np.asarray(p.matrix, dtype=float)) for p in g.pieces]
    return np.asarray(g, dtype=float)


def _table(v, D: int | None = None) -> TimeTable:
    if isinstance(v, PiecewiseValues):
        return TimeTable(
            np.array([p.start for p in v.pieces]), np.array([np.atleast_1d(p.values) for p in v.pieces], dtype=float)
        )
    return TimeTable.constant(v)


def _claims(v, D: int) -> TimeTable:
    if v is None:
        return TimeTable.constant(np.zeros((D, D)))
    if isinstance(v, PiecewiseMatrix):
        return TimeTable(np.array([p.start for p in v.pieces]), np.array([p.matrix for p in v.pieces], dtype=float))
    return TimeTable.constant(np.asarray(v, dtype=float))


def _levy(j: JumpConfig | None, D: int) -> LevyMeasureSpec:
    if j is None:
        return LevyMeasureSpec.none(D)
    lam = np.broadcast_to(np.asarray(j.intensity, dtype=float), (D,)).copy()
    laws = j.laws if isinstance(j.laws, list) else [j.laws] * D
    if len(laws) != D:
        raise ConfigError(f"model.jumps.laws: expected 1 or {D} laws, got {len(laws)}")
    return LevyMeasureSpec(lam, tuple(MarkLaw(law.kind, tuple(law.params)) for law in laws))


def build_params(cfg: RunConfig) -> BancassuranceParams:
    try:
        return _build_params(cfg)
    except ModelValidationError:
        raise
    except ValueError as exc:  # shape mismatches from broadcasting
        raise ConfigError(f"model: {exc}") from exc


def _build_params(cfg: RunConfig) -> BancassuranceParams:
    m = cfg.model
    gen = validate_generator(_generator_raw(m.generator), m.horizon)
    D = gen.D
    if m.initial_state > D:
        raise ConfigError(f"model.initial_state: {m.initial_state} exceeds the {D} regimes")
    return BancassuranceParams(
        gen=gen,
        p_tilde=_table(m.p_tilde),
        a=_table(m.a),
        sigma1=_table(m.sigma1),
        sigma2=_table(m.sigma2),
        levy=_levy(m.jumps, D),
        gamma_claims=_claims(m.gamma_claims, D),
        h1=_table(m.h1),
        h2=_table(m.h2),
        kappa1=m.kappa1,
        kappa2=m.kappa2,
        r_tilde=np.broadcast_to(np.asarray(m.r_tilde, dtype=float), (D,)).copy(),
        K1=m.K1,
        K2=m.K2,
        u_surplus=m.u,
        c=m.c,
        initial_state=m.initial_state - 1,
    )
