"""Deterministic chain analytics.

Transition matrices, marginal laws, the backward coupled linear ODE

    v'(t, e_i) + B(t, e_i) v(t, e_i) + sum_j (v(t, e_j) - v(t, e_i)) mu_ij(t) = 0,

and expectations of time integrals along the chain.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import simpson
from scipy.interpolate import CubicHermiteSpline
from scipy.linalg import expm

from .chain import ChainGenerator
from .errors import InvalidDistribution, NonFiniteBlowup, TimeOrderViolation

DEFAULT_GRID_POINTS = 2001
DEFAULT_ODE_STEPS = 10_000
OVERFLOW_GUARD = 1e300


def default_grid(T: float, points: int = DEFAULT_GRID_POINTS) -> np.ndarray:
    return np.linspace(0.0, T, points)


def _segments(gen: ChainGenerator, a: float, b: float) -> list[tuple[float, float]]:
    """Split ``[a, b]`` at generator breakpoints so every piece is smooth."""
    cuts = [x for x in gen.breakpoints if a < x < b]
    edges = [a, *cuts, b]
    return list(zip(edges[:-1], edges[1:]))


# Stage times are pulled this far (relative) inside a smooth segment so a
# right-continuous coefficient is never read on the wrong side of a switch.
_EDGE = 1e-9


def _rk4(rhs: Callable, y: np.ndarray, t0: float, t1: float, n: int) -> np.ndarray:
    h = (t1 - t0) / n
    lo, hi = min(t0, t1), max(t0, t1)
    pad = _EDGE * (hi - lo)
    f = lambda tau, v: rhs(min(max(tau, lo + pad), hi - pad), v)  # noqa: E731
    t = t0
    for step in range(n):
        k1 = f(t, y)
        k2 = f(t + h / 2, y + h / 2 * k1)
        k3 = f(t + h / 2, y + h / 2 * k2)
        k4 = f(t + h, y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t = t0 + (step + 1) * h
    return y


def _forward_rk4(gen: ChainGenerator, y: np.ndarray, s: float, t: float, steps: int) -> np.ndarray:
    """Integrate ``y' = y Q(t)`` from s to t (y is a row vector or matrix)."""
    rhs = lambda tau, v: v @ gen.matrix(tau)  # noqa: E731
    for a, b in _segments(gen, s, t):
        n = max(1, int(np.ceil(steps * (b - a) / max(t - s, 1e-300))))
        y = _rk4(rhs, y, a, b, n)
    return y


def transition_matrix(
    gen: ChainGenerator, s: float, t: float, method: str = "auto", steps: int = DEFAULT_ODE_STEPS
) -> np.ndarray:
    """``P(s, t)[i, k] = Prob(alpha(t) = e_k | alpha(s) = e_i)``.

    ``method="expm"`` multiplies matrix exponentials over the constant
    pieces; ``"ode"`` solves the forward equation ``dP/dt = P Q(t)`` with
    fixed-step RK4. ``"auto"`` picks expm unless the generator is an
    arbitrary function of time.
    """
    if t < s:
        raise TimeOrderViolation(f"t={t} precedes s={s}")
    if method == "auto":
        method = "ode" if gen.kind == "function" else "expm"
    eye = np.eye(gen.D)
    if t == s:
        return eye
    if method == "ode":
        return _forward_rk4(gen, eye, s, t, steps)
    if method != "expm":
        raise ValueError(f"unknown method {method!r}")
    if gen.kind == "function":
        raise ValueError("expm needs a piecewise-constant generator")
    P = eye
    for a, b in _segments(gen, s, t):
        P = P @ expm(gen.matrix(0.5 * (a + b)) * (b - a))
    return P


def _check_distribution(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or np.any(p < -1e-15) or abs(p.sum() - 1.0) > 1e-10:
        raise InvalidDistribution(f"not a probability vector: {p}")
    return p


def initial_law(D: int, state: int) -> np.ndarray:
    p = np.zeros(D)
    p[state] = 1.0
    return p


def marginal_law(gen: ChainGenerator, initial, t: float) -> np.ndarray:
    p = _check_distribution(initial)
    if len(p) != gen.D:
        raise InvalidDistribution(f"expected {gen.D} states, got {len(p)}")
    return p @ transition_matrix(gen, 0.0, t)


def marginal_laws(gen: ChainGenerator, initial, grid) -> np.ndarray:
    """Marginal laws at every grid time; shape ``(len(grid), D)``."""
    p = _check_distribution(initial)
    if len(p) != gen.D:
        raise InvalidDistribution(f"expected {gen.D} states, got {len(p)}")
    grid = np.asarray(grid, dtype=float)
    out = np.empty((len(grid), gen.D))
    cur = p @ transition_matrix(gen, 0.0, grid[0])
    out[0] = cur
    sub = max(1, int(np.ceil(DEFAULT_ODE_STEPS / max(len(grid) - 1, 1))))
    cache: dict[float, np.ndarray] = {}
    for k in range(1, len(grid)):
        a, b = grid[k - 1], grid[k]
        if gen.kind == "constant":
            h = round(b - a, 15)
            if h not in cache:
                cache[h] = expm(gen.matrices[0] * (b - a))
            cur = cur @ cache[h]
        elif gen.kind == "piecewise":
            cur = cur @ transition_matrix(gen, a, b)
        else:
            cur = _forward_rk4(gen, cur, a, b, sub)
        out[k] = cur
    return out


def _rate_vector(B, D: int) -> Callable[[float], np.ndarray]:
    if B is None:
        zero = np.zeros(D)
        return lambda t: zero
    if callable(B):
        return lambda t: np.broadcast_to(np.asarray(B(t), dtype=float), (D,))
    const = np.broadcast_to(np.asarray(B, dtype=float), (D,)).copy()
    return lambda t: const


@dataclass(frozen=True, eq=False)
class CoupledValue:
    """Per-state function ``v(t, e_i)`` tabulated on a time grid.

    Calling the object interpolates with cubic Hermite splines built from
    the ODE's own derivative, which keeps fourth-order accuracy between
    nodes.
    """

    grid: np.ndarray
    values: np.ndarray
    derivatives: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_spline", CubicHermiteSpline(self.grid, self.values, self.derivatives))

    @property
    def D(self) -> int:
        return self.values.shape[1]

    def __call__(self, t, i=None):
        """Value at time(s) ``t``; all states, or state(s) ``i`` (broadcast)."""
        t_arr = np.clip(np.asarray(t, dtype=float), self.grid[0], self.grid[-1])
        v = self._spline(t_arr)
        if i is None:
            return v
        i = np.asarray(i)
        if t_arr.ndim == 0:
            return v[i]
        shape = np.broadcast_shapes(t_arr.shape, i.shape)
        v = np.broadcast_to(v, shape + v.shape[-1:])
        return np.take_along_axis(v, np.broadcast_to(i, shape)[..., None], axis=-1)[..., 0]

    def table(self) -> list[tuple[float, int, float]]:
        """Rows ``(t, state_index, value)`` with 0-based states."""
        return [(float(t), i, float(self.values[k, i])) for k, t in enumerate(self.grid) for i in range(self.D)]


def solve_backward_coupled(gen: ChainGenerator, B, terminal, grid=None) -> CoupledValue:
    """Solve the regime-coupled linear ODE backward from ``grid[-1]``.

    ``B`` is ``None`` (zero), a per-state constant, or a callable
    ``t -> array(D)``. Uses fixed-step RK4 between consecutive grid nodes,
    with extra sub-steps at generator breakpoints.
    """
    if grid is None:
        grid = default_grid(gen.T)
    grid = np.asarray(grid, dtype=float)
    if np.any(np.diff(grid) <= 0):
        raise TimeOrderViolation("grid must be strictly increasing")
    D = gen.D
    Bf = _rate_vector(B, D)
    g = np.broadcast_to(np.asarray(terminal, dtype=float), (D,)).copy()

    def rhs(t, v):
        return -Bf(t) * v - gen.matrix(t) @ v

    K = len(grid)
    values = np.empty((K, D))
    values[-1] = g
    v = g
    for k in range(K - 1, 0, -1):
        for a, b in reversed(_segments(gen, grid[k - 1], grid[k])):
            v = _rk4(rhs, v, b, a, 1)
        if not np.all(np.isfinite(v)) or np.max(np.abs(v)) > OVERFLOW_GUARD:
            raise NonFiniteBlowup(f"coupled solution exceeded {OVERFLOW_GUARD:g} at t={grid[k - 1]}")
        values[k - 1] = v
    values[-1] = g
    derivs = np.array([rhs(t, values[k]) for k, t in enumerate(grid)])
    return CoupledValue(grid, values, derivs)


def _state_values(f, t: float, D: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(f(t, np.arange(D)), dtype=float), (D,))


def _grid_values(f, grid: np.ndarray, D: int) -> np.ndarray:
    """``f`` on the whole ``(t, i)`` grid, vectorised when ``f`` broadcasts."""
    try:
        out = np.asarray(f(grid[:, None], np.arange(D)[None, :]), dtype=float)
        return np.broadcast_to(out, (len(grid), D))
    except (ValueError, TypeError, IndexError):
        return np.array([_state_values(f, float(t), D) for t in grid])


def chain_expectation_integral(gen: ChainGenerator, initial, f, grid=None) -> float:
    """``E[int_0^T f(t, alpha(t)) dt]`` by composite Simpson over marginal laws.

    ``f(t, i)`` is first tried on the full ``(K, 1) x (1, D)`` grid; an
    integrand that cannot broadcast that way is evaluated one time at a
    time with ``i = arange(D)``.
    """
    if grid is None:
        grid = default_grid(gen.T)
    grid = np.asarray(grid, dtype=float)
    laws = marginal_laws(gen, initial, grid)
    vals = _grid_values(f, grid, gen.D)
    return float(simpson(np.sum(laws * vals, axis=1), x=grid))


def chain_expectation_at(gen: ChainGenerator, initial, t: float, f) -> float:
    """``E[f(alpha(t))]`` for ``f(i)`` called with ``i = arange(D)``."""
    law = marginal_law(gen, initial, t)
    return float(law @ np.broadcast_to(np.asarray(f(np.arange(gen.D)), dtype=float), (gen.D,)))
