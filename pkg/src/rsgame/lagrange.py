"""Terminal constraints and scalar Lagrange multipliers.

The recipe for expectation constraints: for each trial multiplier solve the
unconstrained problem, then root-find the constraint residual in the
multiplier. Almost-sure constraints are only verified on simulated paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import BackendUnavailable, MaxIterations, NoSignChange
from .game import ConstraintSpec, Game
from .jumpdiff import ControlPair, Estimate, NoiseBundle, PathEnsemble, Payoff, mean_se

DEFAULT_BRACKET = (1e-6, 1e6)
MAX_ITER = 200
SWEEP_TOL = 1e-8
MAX_SWEEPS = 50

__all__ = [
    "ConstraintSpec",
    "constraint_residual",
    "solve_multiplier",
    "bisect_multiplier",
    "alternating_multipliers",
    "verify_as_constraint",
    "lagrangian_objective",
    "MultiplierResult",
]


def constraint_residual(
    model: Game,
    constraint: ConstraintSpec,
    controls: ControlPair,
    backend: str = "deterministic",
    n_paths: int = 10_000,
    seed: int = 0,
    noise: NoiseBundle | None = None,
) -> Estimate:
    """``E[M(Y_T, alpha_T)]`` with its standard error (zero when exact)."""
    if constraint.kind != "expectation":
        raise ValueError("constraint_residual handles expectation constraints only")
    if backend == "deterministic":
        if constraint.deterministic is None:
            raise BackendUnavailable(f"no deterministic evaluator for {constraint.name}")
        return Estimate(float(constraint.deterministic(controls)), 0.0)
    if backend != "monte_carlo":
        raise ValueError(f"unknown backend {backend!r}")
    ens = model.simulate(controls, n_paths=n_paths, seed=seed, noise=noise, keep_paths=False)
    return mean_se(constraint.evaluate(ens.terminal, ens.terminal_regime.astype(np.int64)))


@dataclass
class MultiplierResult:
    lam: float
    residual: float
    se: float
    iterations: int
    trace: list[dict] = field(default_factory=list)
    controls: ControlPair | None = None
    se_within_tol: bool = True

    def trace_rows(self) -> tuple[list[str], list[list]]:
        header = ["iteration", "lambda_lo", "lambda_hi", "lambda", "residual", "se"]
        return header, [[r[k] for k in header] for r in self.trace]


def bisect_multiplier(
    residual: Callable[[float], Estimate | float],
    bracket: tuple[float, float] = DEFAULT_BRACKET,
    tol: float = 1e-10,
    monte_carlo: bool = False,
    log_scale: bool | None = None,
    max_iter: int = MAX_ITER,
    z: float = 3.0,
) -> MultiplierResult:
    """Bisection for a root of ``residual`` inside ``bracket``.

    Deterministic residuals stop at ``|r| <= tol``; Monte Carlo residuals
    (returning ``Estimate``) stop once ``|r| <= z * SE``. Midpoints are
    geometric when the bracket is positive, unless ``log_scale=False``.
    The bracket collapsing to machine precision also ends the search.
    """

    def ev(lam):
        out = residual(lam)
        return out if isinstance(out, Estimate) else Estimate(float(out), 0.0)

    lo, hi = map(float, bracket)
    if not lo < hi:
        raise ValueError("bracket must satisfy lo < hi")
    if log_scale is None:
        log_scale = lo > 0
    r_lo, r_hi = ev(lo), ev(hi)
    trace = [
        {"iteration": 0, "lambda_lo": lo, "lambda_hi": hi, "lambda": lo, "residual": r_lo.value, "se": r_lo.se},
        {"iteration": 0, "lambda_lo": lo, "lambda_hi": hi, "lambda": hi, "residual": r_hi.value, "se": r_hi.se},
    ]

    def done(r: Estimate) -> bool:
        return abs(r.value) <= (z * r.se if monte_carlo else tol)

    for lam, r in ((lo, r_lo), (hi, r_hi)):
        if done(r):
            return MultiplierResult(lam, r.value, r.se, 0, trace, se_within_tol=r.se <= tol)
    if np.sign(r_lo.value) == np.sign(r_hi.value):
        raise NoSignChange(f"residual has the same sign at {lo:g} ({r_lo.value:.3g}) and {hi:g} ({r_hi.value:.3g})")
    for it in range(1, max_iter + 1):
        mid = float(np.sqrt(lo * hi)) if log_scale else 0.5 * (lo + hi)
        r = ev(mid)
        trace.append({"iteration": it, "lambda_lo": lo, "lambda_hi": hi, "lambda": mid, "residual": r.value, "se": r.se})
        if done(r) or not lo < mid < hi:
            return MultiplierResult(mid, r.value, r.se, it, trace, se_within_tol=r.se <= tol)
        if np.sign(r.value) == np.sign(r_lo.value):
            lo, r_lo = mid, r
        else:
            hi = mid
    raise MaxIterations(f"no root within {max_iter} bisection steps")


def solve_multiplier(
    model: Game,
    solver: Callable[[float], ControlPair],
    constraint: ConstraintSpec,
    bracket: tuple[float, float] = DEFAULT_BRACKET,
    tol: float = 1e-10,
    backend: str = "deterministic",
    n_paths: int = 10_000,
    seed: int = 0,
    max_iter: int = MAX_ITER,
) -> MultiplierResult:
    """Find ``lam`` with ``E[M] = 0`` under the controls ``solver(lam)``.

    The Monte Carlo backend draws one noise bundle and reuses it for every
    trial multiplier, so the residual is a fixed (monotone) function of
    ``lam`` and bisection is well defined.
    """
    noise = model.noise(n_paths, seed) if backend == "monte_carlo" else None

    def residual(lam: float) -> Estimate:
        return constraint_residual(model, constraint, solver(lam), backend, n_paths, seed, noise)

    res = bisect_multiplier(residual, bracket, tol, monte_carlo=backend == "monte_carlo", max_iter=max_iter)
    res.controls = solver(res.lam)
    return res


def alternating_multipliers(
    model: Game,
    solver: Callable[[Sequence[float]], ControlPair],
    constraints: Sequence[ConstraintSpec],
    start: Sequence[float],
    brackets: Sequence[tuple[float, float]] | None = None,
    tol: float = 1e-10,
    sweep_tol: float = SWEEP_TOL,
    max_sweeps: int = MAX_SWEEPS,
    backend: str = "deterministic",
    n_paths: int = 10_000,
    seed: int = 0,
) -> tuple[np.ndarray, int]:
    """Gauss-Seidel sweeps over per-player multiplier searches.

    ``solver(lams)`` maps the full multiplier vector to a control pair.
    Stops when no multiplier moves by more than ``sweep_tol`` (relative).
    """
    lams = np.asarray(start, dtype=float).copy()
    brackets = brackets or [DEFAULT_BRACKET] * len(lams)
    for sweep in range(1, max_sweeps + 1):
        old = lams.copy()
        for k, con in enumerate(constraints):

            def one(lam, k=k):
                trial = lams.copy()
                trial[k] = lam
                return solver(trial)

            lams[k] = solve_multiplier(model, one, con, brackets[k], tol, backend, n_paths, seed).lam
        if np.all(np.abs(lams - old) <= sweep_tol * np.maximum(1.0, np.abs(old))):
            return lams, sweep
    raise MaxIterations(f"multipliers did not settle within {max_sweeps} sweeps")


def verify_as_constraint(ensemble: PathEnsemble, constraint: ConstraintSpec, tol: float = 1e-9) -> tuple[float, float]:
    """Fraction of paths with ``|M| <= tol`` and the largest ``|M|``."""
    if ensemble.n_paths == 0:
        return 1.0, 0.0
    m = np.abs(constraint.evaluate(ensemble.terminal, ensemble.terminal_regime.astype(np.int64)))
    return float(np.mean(m <= tol)), float(m.max())


def lagrangian_objective(model: Game, lam, player: int) -> Payoff:
    """Player ``player``'s payoff with ``lam * M`` added to the terminal reward.

    ``lam`` may be a scalar or, for almost-sure constraints, a callable
    ``(y, i) -> (n,)`` giving a terminal-measurable multiplier per path.
    """
    idx = model.payoff_index(player)
    base = model.payoffs[idx]
    con = model.constraints[idx]
    if con is None or (not callable(lam) and lam == 0):
        return base
    g = base.terminal

    def terminal(y, i):
        weight = lam(y, i) if callable(lam) else lam
        out = weight * con.evaluate(y, i)
        return out if g is None else out + np.asarray(g(y, i), dtype=float)

    return Payoff(base.running, terminal)
