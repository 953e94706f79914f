"""Controlled regime-switching jump-diffusion paths and payoff estimates.

State dynamics (per path, left-point coefficients)::

    dY = b dt + sigma dW + int eta(z) N~(dt, dz) + gamma dPhi~

Jumps are finite-activity: the Levy measure in regime ``i`` is
``intensity[i] * law_i(dz)``. Chain and Poisson jumps are applied at their
exact times; Brownian increments are split across them with Brownian
bridges. Components flagged ``multiplicative`` are advanced in log space
(exact stochastic exponential for coefficients proportional to the
component), which keeps them positive.

Callbacks are vectorised over paths: ``t``, ``i``, ``u1``, ``u2`` arrive as
shape ``(n,)`` arrays and ``y`` as ``(n, N)``.
"""

from __future__ import annotations

import csv
from functools import lru_cache
from dataclasses import dataclass, replace
from typing import Callable, NamedTuple

import numpy as np
from scipy.special import ndtri

from .chain import ChainGenerator, ChainPath, sample_chain_path
from .errors import (
    InadmissibleControl,
    ModelValidationError,
    NonFinitePayoff,
    NonFiniteState,
    StepTooLarge,
)
from .rng import path_rng, path_seeds

STEP_GUARD = 0.5
DEFAULT_CHUNK = 10_000
QUAD_POINTS = 64
# Smooth mark functionals only; the simulator trades nodes for speed.
SIM_QUAD_POINTS = 16


# -- Levy measure --------------------------------------------------------------


@lru_cache(maxsize=256)
def _law_nodes(kind: str, p: tuple, points: int) -> tuple[np.ndarray, np.ndarray]:
    if kind == "two_point":
        return np.array([p[0], p[1]]), np.array([p[2], 1.0 - p[2]])
    if kind == "uniform":
        x, w = np.polynomial.legendre.leggauss(points)
        return p[0] + (x + 1) * (p[1] - p[0]) / 2, w / 2
    x, w = np.polynomial.hermite_e.hermegauss(points)
    return np.expm1(p[0] + p[1] * x), w / np.sqrt(2 * np.pi)


@dataclass(frozen=True)
class MarkLaw:
    """Distribution of a jump mark ``z``.

    * ``two_point``: ``params = (v0, v1, p0)``, ``P(z = v0) = p0``.
    * ``uniform``: ``params = (lo, hi)``.
    * ``lognormal``: ``params = (m, s)`` with ``ln(1 + z) ~ Normal(m, s^2)``.
    """

    kind: str
    params: tuple

    def __post_init__(self):
        p = self.params
        if self.kind == "two_point":
            if len(p) != 3 or not 0.0 <= p[2] <= 1.0:
                raise ModelValidationError(f"two_point needs (v0, v1, p0) with p0 in [0, 1], got {p}")
        elif self.kind == "uniform":
            if len(p) != 2 or not p[0] < p[1]:
                raise ModelValidationError(f"uniform needs lo < hi, got {p}")
        elif self.kind == "lognormal":
            if len(p) != 2 or p[1] < 0:
                raise ModelValidationError(f"lognormal needs (m, s >= 0), got {p}")
        else:
            raise ModelValidationError(f"unknown mark law {self.kind!r}")
        if not all(np.isfinite(p)):
            raise ModelValidationError(f"non-finite mark law parameters {p}")

    def ppf(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        p = self.params
        if self.kind == "two_point":
            return np.where(u < p[2], p[0], p[1])
        if self.kind == "uniform":
            return p[0] + u * (p[1] - p[0])
        return np.expm1(p[0] + p[1] * ndtri(u))

    def nodes(self, points: int = QUAD_POINTS) -> tuple[np.ndarray, np.ndarray]:
        """Quadrature nodes and probability weights (summing to one)."""
        return _law_nodes(self.kind, tuple(float(x) for x in self.params), points)

    def support_min(self) -> float:
        p = self.params
        if self.kind == "two_point":
            return min(p[0], p[1]) if 0 < p[2] < 1 else (p[0] if p[2] == 1 else p[1])
        if self.kind == "uniform":
            return p[0]
        return -1.0 if p[1] > 0 else float(np.expm1(p[0]))


@dataclass(frozen=True, eq=False)
class LevyMeasureSpec:
    """Finite-activity Levy measure per regime: ``nu_i = intensity[i] * laws[i]``."""

    intensity: np.ndarray
    laws: tuple[MarkLaw, ...]

    def __post_init__(self):
        lam = np.asarray(self.intensity, dtype=float)
        object.__setattr__(self, "intensity", lam)
        if lam.ndim != 1 or len(lam) != len(self.laws):
            raise ModelValidationError("need one intensity and one mark law per regime")
        if np.any(lam < 0) or not np.all(np.isfinite(lam)):
            raise ModelValidationError(f"jump intensities must be finite and >= 0, got {lam}")
        m2 = self.second_moments()
        if not np.all(np.isfinite(m2)):
            raise ModelValidationError("mark laws must have finite second moment")

    @classmethod
    def none(cls, D: int) -> "LevyMeasureSpec":
        return cls(np.zeros(D), tuple(MarkLaw("two_point", (0.0, 0.0, 1.0)) for _ in range(D)))

    @property
    def D(self) -> int:
        return len(self.laws)

    @property
    def active(self) -> bool:
        return bool(np.any(self.intensity > 0))

    def nodes(self, i: int, points: int = QUAD_POINTS) -> tuple[np.ndarray, np.ndarray]:
        """Nodes and nu-weights (probability weights times intensity)."""
        z, w = self.laws[i].nodes(points)
        return z, w * self.intensity[i]

    def integrate(self, fn: Callable[[np.ndarray], np.ndarray], i: int) -> float:
        """``int fn(z) nu_i(dz)``."""
        if self.intensity[i] == 0:
            return 0.0
        z, w = self.nodes(i)
        return float(np.sum(w * fn(z)))

    def second_moments(self) -> np.ndarray:
        return np.array([self.integrate(np.square, i) if self.intensity[i] > 0 else 0.0 for i in range(self.D)])


# -- coefficients and controls -----------------------------------------------


@dataclass(frozen=True, eq=False)
class CoefficientSet:
    """Coefficients of the controlled state equation.

    ``b -> (n, N)``, ``sigma -> (n, N, M)``, ``eta(..., z) -> (n, N)`` and
    ``gamma -> (n, N, D)`` where column ``j`` of ``gamma`` is the impulse on
    a transition into regime ``j``. ``None`` means identically zero.
    ``eta_nu``, when given, is the closed form of ``int eta(..., z) nu_i(dz)``
    and replaces quadrature in the jump compensator.
    """

    N: int
    M: int
    b: Callable
    sigma: Callable | None = None
    eta: Callable | None = None
    gamma: Callable | None = None
    multiplicative: tuple[bool, ...] = ()
    eta_nu: Callable | None = None

    def __post_init__(self):
        mult = tuple(self.multiplicative) or (False,) * self.N
        if len(mult) != self.N:
            raise ModelValidationError("multiplicative flags must match state dimension")
        object.__setattr__(self, "multiplicative", mult)


@dataclass(frozen=True, eq=False)
class ControlPair:
    """Feedback controls ``u_k(t, i, y)`` for both players.

    ``state_feedback=False`` promises the controls ignore ``y``; the
    deterministic chain-expectation routines then call them with ``y=None``.
    """

    u1: Callable
    u2: Callable
    bounds1: tuple[float, float] | None = None
    bounds2: tuple[float, float] | None = None
    state_feedback: bool = False

    @classmethod
    def zero(cls) -> "ControlPair":
        return cls(lambda t, i, y: 0.0, lambda t, i, y: 0.0)

    def control(self, player: int) -> Callable:
        return self.u1 if player == 1 else self.u2

    def with_control(self, player: int, fn: Callable) -> "ControlPair":
        return replace(self, u1=fn) if player == 1 else replace(self, u2=fn)

    def evaluate(self, t, i, y) -> tuple[np.ndarray, np.ndarray]:
        n = np.shape(i)[0] if np.ndim(i) else 1
        out = []
        for fn, bounds, name in ((self.u1, self.bounds1, "u1"), (self.u2, self.bounds2, "u2")):
            u = np.broadcast_to(np.asarray(fn(t, i, y), dtype=float), (n,))
            if not np.all(np.isfinite(u)):
                raise InadmissibleControl(f"{name} returned non-finite values")
            if bounds is not None and (np.any(u < bounds[0]) or np.any(u > bounds[1])):
                raise InadmissibleControl(f"{name} left its admissible box {bounds}")
            out.append(u)
        return out[0], out[1]


@dataclass(frozen=True, eq=False)
class Payoff:
    """Running payoff ``f(t, y, i, u1, u2) -> (n,)`` plus terminal ``g(y, i) -> (n,)``."""

    running: Callable | None = None
    terminal: Callable | None = None


class Estimate(NamedTuple):
    value: float
    se: float


def mean_se(x: np.ndarray) -> Estimate:
    x = np.asarray(x, dtype=float)
    if len(x) < 2:
        return Estimate(float(np.mean(x)), 0.0)
    return Estimate(float(np.mean(x)), float(np.std(x, ddof=1) / np.sqrt(len(x))))


# -- noise -----------------------------------------------------------------------


@dataclass(eq=False)
class NoiseBundle:
    """All randomness for a batch of paths on one grid.

    Reusing a bundle across control variants gives common random numbers:
    the chain, Brownian and Poisson draws do not depend on the controls.
    Events are padded per path with ``time = inf``; ``kind`` is 1 for a
    chain transition (``target`` holds the new regime) and 2 for a Poisson
    arrival (``mark`` holds ``z``).
    """

    grid: np.ndarray
    seeds: np.ndarray
    chains: list[ChainPath]
    dW: np.ndarray
    ev_time: np.ndarray
    ev_kind: np.ndarray
    ev_target: np.ndarray
    ev_mark: np.ndarray
    ev_bridge: np.ndarray

    @property
    def n_paths(self) -> int:
        return len(self.seeds)

    @classmethod
    def generate(
        cls, gen: ChainGenerator, levy: LevyMeasureSpec, initial: int, grid, M: int, seeds
    ) -> "NoiseBundle":
        grid = np.asarray(grid, dtype=float)
        seeds = np.asarray(seeds, dtype=np.uint64)
        sqrt_h = np.sqrt(np.diff(grid))
        lam_bar = float(levy.intensity.max()) if levy.active else 0.0
        n, K = len(seeds), len(grid)
        chains, dW, events = [], np.empty((n, K - 1, M)), []
        for p, seed in enumerate(seeds):
            rng = path_rng(seed)
            chain = sample_chain_path(gen, initial, rng)
            chains.append(chain)
            dW[p] = rng.standard_normal((K - 1, M)) * sqrt_h[:, None]
            if lam_bar > 0:
                n_cand = rng.poisson(lam_bar * gen.T)
                times = np.sort(rng.uniform(0.0, gen.T, n_cand))
                accept_u = rng.random(n_cand)
                mark_u = rng.random(n_cand)
                reg = chain.state_before(times)
                keep = accept_u * lam_bar < levy.intensity[reg]
                times, reg, mark_u = times[keep], reg[keep], mark_u[keep]
                marks = np.array([levy.laws[r].ppf(u) for r, u in zip(reg, mark_u)], dtype=float)
            else:
                times, marks = np.empty(0), np.empty(0)
            ev = sorted(
                [(t, 1, int(j), 0.0) for t, j in zip(chain.jump_times, chain.jump_targets)]
                + [(t, 2, -1, float(z)) for t, z in zip(times, marks)]
            )
            bridge = rng.standard_normal((len(ev), M))
            events.append((ev, bridge))
        E = max([len(ev) for ev, _ in events], default=0)
        ev_time = np.full((n, E), np.inf)
        ev_kind = np.zeros((n, E), dtype=np.int8)
        ev_target = np.full((n, E), -1, dtype=np.int64)
        ev_mark = np.zeros((n, E))
        ev_bridge = np.zeros((n, E, M))
        for p, (ev, bridge) in enumerate(events):
            for e, (t, kind, target, z) in enumerate(ev):
                ev_time[p, e], ev_kind[p, e], ev_target[p, e], ev_mark[p, e] = t, kind, target, z
            ev_bridge[p, : len(ev)] = bridge
        return cls(grid, seeds, chains, dW, ev_time, ev_kind, ev_target, ev_mark, ev_bridge)

    def subset(self, sl: slice) -> "NoiseBundle":
        return NoiseBundle(
            self.grid,
            self.seeds[sl],
            self.chains[sl],
            self.dW[sl],
            self.ev_time[sl],
            self.ev_kind[sl],
            self.ev_target[sl],
            self.ev_mark[sl],
            self.ev_bridge[sl],
        )


# -- simulation ----------------------------------------------------------------------


@dataclass(eq=False)
class PathEnsemble:
    """Simulated paths on a common grid.

    ``states`` is ``(n, K, N)`` when paths were kept, else ``None``;
    ``regimes[p, k]`` is ``alpha(grid[k])`` (right-continuous).
    """

    grid: np.ndarray
    y0: np.ndarray
    seeds: np.ndarray
    chains: list[ChainPath]
    terminal: np.ndarray
    regimes: np.ndarray
    states: np.ndarray | None = None
    initial_state: int = 0

    @property
    def n_paths(self) -> int:
        return len(self.seeds)

    @property
    def terminal_regime(self) -> np.ndarray:
        return self.regimes[:, -1]

    def require_paths(self) -> np.ndarray:
        if self.states is None:
            raise ValueError("ensemble was simulated with keep_paths=False")
        return self.states


def _rates_at(gen: ChainGenerator, t: np.ndarray) -> np.ndarray:
    if gen.kind == "constant":
        return np.broadcast_to(gen.matrices[0], (len(t), gen.D, gen.D))
    if gen.kind == "piecewise":
        return gen.matrices[gen.piece_index(t)]
    return np.array([gen.matrix(x) for x in t])


class _Stepper:
    """Advances a batch of paths through one sub-interval at a time."""

    def __init__(self, coeffs, levy, gen, controls):
        self.c, self.levy, self.gen, self.controls = coeffs, levy, gen, controls
        self.mult = np.array(coeffs.multiplicative, dtype=bool)

    def nu_integral(self, fn, t, y, i, u1, u2, width: int) -> np.ndarray:
        """``int fn(..., z) nu_i(dz)`` per path; ``fn`` returns ``(m, width)``."""
        out = np.zeros((len(i), width))
        if fn is None or not self.levy.active:
            return out
        for r in np.unique(i):
            if self.levy.intensity[r] == 0:
                continue
            sel = np.nonzero(i == r)[0]
            z, w = self.levy.nodes(int(r), SIM_QUAD_POINTS)
            Q, m = len(z), len(sel)
            rep = np.repeat(sel, Q)
            vals = np.asarray(fn(t[rep], y[rep], i[rep], u1[rep], u2[rep], np.tile(z, m)), dtype=float)
            out[sel] = np.einsum("mqn,q->mn", vals.reshape(m, Q, width), w)
        return out

    def _eta_compensator(self, t, y, i, u1, u2) -> np.ndarray:
        if self.c.eta is not None and self.c.eta_nu is not None:
            return np.asarray(self.c.eta_nu(t, y, i, u1, u2), dtype=float).reshape(y.shape)
        return self.nu_integral(self.c.eta, t, y, i, u1, u2, y.shape[1])

    def _gamma_compensator(self, t, y, i, u1, u2) -> np.ndarray:
        if self.c.gamma is None:
            return np.zeros_like(y)
        rows = _rates_at(self.gen, t)[np.arange(len(i)), i].copy()
        rows[np.arange(len(i)), i] = 0.0
        g = np.asarray(self.c.gamma(t, y, i, u1, u2), dtype=float)
        return np.einsum("nkd,nd->nk", g, rows)

    def advance(self, y, i, s0, s1, dW, h_step):
        """Return the state at ``s1`` given state ``y`` at ``s0`` and regime ``i``."""
        dt = s1 - s0
        u1, u2 = self.controls.evaluate(s0, i, y)
        b = np.asarray(self.c.b(s0, y, i, u1, u2), dtype=float).reshape(y.shape)
        comp = self._eta_compensator(s0, y, i, u1, u2) + self._gamma_compensator(s0, y, i, u1, u2)
        if self.c.sigma is not None:
            sig = np.asarray(self.c.sigma(s0, y, i, u1, u2), dtype=float).reshape(y.shape + (-1,))
            noise = np.einsum("nkm,nm->nk", sig, dW)
        else:
            sig, noise = None, np.zeros_like(y)
        out = y + (b - comp) * dt[:, None] + noise
        if self.mult.any():
            m = self.mult
            ym = y[:, m]
            if np.any(ym <= 0):
                raise NonFiniteState("multiplicative component is not positive")
            rel_b, rel_comp = b[:, m] / ym, comp[:, m] / ym
            if np.max(np.abs(rel_b), initial=0.0) * h_step > STEP_GUARD:
                raise StepTooLarge("h * sup|b / y| exceeds guard for a multiplicative component")
            dlog = (rel_b - rel_comp) * dt[:, None]
            if sig is not None:
                rel_sig = sig[:, m, :] / ym[..., None]
                dlog += -0.5 * np.sum(rel_sig**2, axis=-1) * dt[:, None] + np.einsum("nkm,nm->nk", rel_sig, dW)
            out[:, m] = ym * np.exp(dlog)
        if np.any(~self.mult) and np.max(np.abs(b[:, ~self.mult]), initial=0.0) * h_step > STEP_GUARD:
            raise StepTooLarge(f"h * sup|b| = {np.max(np.abs(b[:, ~self.mult])) * h_step:g} exceeds {STEP_GUARD}")
        return out

    def jump(self, y, i, tau, kind, target, mark):
        """Apply chain (kind 1) or Poisson (kind 2) impulses at time ``tau``."""
        u1, u2 = self.controls.evaluate(tau, i, y)
        out = y.copy()
        chain = kind == 1
        if chain.any() and self.c.gamma is not None:
            s = np.nonzero(chain)[0]
            g = np.asarray(self.c.gamma(tau[s], y[s], i[s], u1[s], u2[s]), dtype=float)
            out[s] += g[np.arange(len(s)), :, target[s]]
        pois = kind == 2
        if pois.any() and self.c.eta is not None:
            s = np.nonzero(pois)[0]
            out[s] += np.asarray(self.c.eta(tau[s], y[s], i[s], u1[s], u2[s], mark[s]), dtype=float).reshape(len(s), -1)
        if self.mult.any() and np.any(out[:, self.mult] <= 0):
            raise NonFiniteState("jump drove a multiplicative component to a nonpositive value")
        return out


def _simulate_chunk(stepper: _Stepper, y0, initial, grid, noise: NoiseBundle, keep_paths: bool):
    n, N, K = noise.n_paths, len(y0), len(grid)
    y = np.tile(np.asarray(y0, dtype=float), (n, 1))
    regime = np.full(n, initial, dtype=np.int64)
    regimes = np.empty((n, K), dtype=np.int16)
    regimes[:, 0] = initial
    states = np.empty((n, K, N)) if keep_paths else None
    if keep_paths:
        states[:, 0] = y
    ptr = np.zeros(n, dtype=np.int64)
    E = noise.ev_time.shape[1]
    rows = np.arange(n)
    for k in range(K - 1):
        t1, h = grid[k + 1], grid[k + 1] - grid[k]
        R = noise.dW[:, k, :].copy()
        s = np.full(n, grid[k])
        while E:
            nxt = np.where(ptr < E, noise.ev_time[rows, np.minimum(ptr, E - 1)], np.inf)
            act = np.nonzero(nxt <= t1)[0]
            if len(act) == 0:
                break
            e = ptr[act]
            tau = noise.ev_time[act, e]
            s0 = s[act]
            span = t1 - s0
            frac = np.where(span > 0, (tau - s0) / np.where(span > 0, span, 1.0), 0.0)
            sd = np.sqrt(np.clip((tau - s0) * (t1 - tau) / np.where(span > 0, span, 1.0), 0.0, None))
            dWa = frac[:, None] * R[act] + sd[:, None] * noise.ev_bridge[act, e]
            ya = stepper.advance(y[act], regime[act], s0, tau, dWa, h)
            R[act] -= dWa
            kind = noise.ev_kind[act, e]
            y[act] = stepper.jump(ya, regime[act], tau, kind, noise.ev_target[act, e], noise.ev_mark[act, e])
            chain = kind == 1
            regime[act[chain]] = noise.ev_target[act[chain], e[chain]]
            s[act] = tau
            ptr[act] += 1
        y = stepper.advance(y, regime, s, np.full(n, t1), R, h)
        if not np.all(np.isfinite(y)):
            raise NonFiniteState(f"non-finite state at t={t1}")
        regimes[:, k + 1] = regime
        if keep_paths:
            states[:, k + 1] = y
    return y, regimes, states


def simulate_paths(
    coeffs: CoefficientSet,
    levy: LevyMeasureSpec,
    gen: ChainGenerator,
    controls: ControlPair,
    y0,
    grid,
    n_paths: int | None = None,
    seed: int = 0,
    initial_state: int = 0,
    keep_paths: bool = True,
    noise: NoiseBundle | None = None,
    chunk_size: int = DEFAULT_CHUNK,
) -> PathEnsemble:
    """Euler-Maruyama simulation of the controlled state equation.

    Pass ``noise`` to reuse draws across control variants (common random
    numbers); otherwise noise is generated chunk by chunk from per-path
    seeds spawned from ``seed``.
    """
    grid = np.asarray(grid, dtype=float)
    y0 = np.asarray(y0, dtype=float).reshape(-1)
    if len(y0) != coeffs.N:
        raise ModelValidationError(f"y0 has {len(y0)} components, expected {coeffs.N}")
    if np.any(np.diff(grid) <= 0):
        raise ModelValidationError("grid must be strictly increasing")
    if np.any(np.array(coeffs.multiplicative) & (y0 <= 0)):
        raise ModelValidationError("multiplicative components need a positive initial value")
    h_max = float(np.max(np.diff(grid)))
    if levy.active and h_max * float(levy.intensity.max()) > STEP_GUARD:
        raise StepTooLarge(f"h * jump intensity = {h_max * levy.intensity.max():g} exceeds {STEP_GUARD}")
    if noise is not None:
        if not np.array_equal(noise.grid, grid):
            raise ModelValidationError("noise bundle was generated on a different grid")
        seeds = noise.seeds
    else:
        if n_paths is None:
            raise ValueError("need n_paths or a noise bundle")
        seeds = path_seeds(seed, n_paths)
    stepper = _Stepper(coeffs, levy, gen, controls)
    parts = []
    for start in range(0, len(seeds), chunk_size):
        sl = slice(start, start + chunk_size)
        chunk = noise.subset(sl) if noise is not None else NoiseBundle.generate(
            gen, levy, initial_state, grid, coeffs.M, seeds[sl]
        )
        parts.append((chunk.chains, *_simulate_chunk(stepper, y0, initial_state, grid, chunk, keep_paths)))
    chains = [c for p in parts for c in p[0]]
    terminal = np.concatenate([p[1] for p in parts]) if parts else np.empty((0, coeffs.N))
    regimes = np.concatenate([p[2] for p in parts]) if parts else np.empty((0, len(grid)), dtype=np.int16)
    states = np.concatenate([p[3] for p in parts]) if keep_paths and parts else None
    return PathEnsemble(grid, y0, np.asarray(seeds), chains, terminal, regimes, states, initial_state)


# -- payoffs and diagnostics ---------------------------------------------------------


def _controls_on_grid(ensemble: PathEnsemble, controls: ControlPair):
    states = ensemble.require_paths()
    n, K = states.shape[:2]
    u1, u2 = np.empty((n, K)), np.empty((n, K))
    for k, t in enumerate(ensemble.grid):
        u1[:, k], u2[:, k] = controls.evaluate(np.full(n, t), ensemble.regimes[:, k].astype(np.int64), states[:, k])
    return u1, u2


def payoff_samples(ensemble: PathEnsemble, payoff: Payoff, controls: ControlPair | None = None) -> np.ndarray:
    """Per-path ``int f dt + g(Y_T, alpha_T)`` with trapezoid quadrature."""
    n = ensemble.n_paths
    total = np.zeros(n)
    if payoff.running is not None:
        states = ensemble.require_paths()
        u1, u2 = _controls_on_grid(ensemble, controls or ControlPair.zero())
        vals = np.empty((n, len(ensemble.grid)))
        for k, t in enumerate(ensemble.grid):
            vals[:, k] = payoff.running(
                np.full(n, t), states[:, k], ensemble.regimes[:, k].astype(np.int64), u1[:, k], u2[:, k]
            )
        total += np.trapezoid(vals, ensemble.grid, axis=1)
    if payoff.terminal is not None:
        total += np.asarray(payoff.terminal(ensemble.terminal, ensemble.terminal_regime.astype(np.int64)), dtype=float)
    if not np.all(np.isfinite(total)):
        raise NonFinitePayoff("payoff is not finite on some paths")
    return total


def evaluate_performance(
    ensemble: PathEnsemble, f=None, g=None, controls: ControlPair | None = None
) -> Estimate:
    """Monte Carlo estimate of ``E[int f dt + g]`` and its standard error."""
    if ensemble.n_paths == 0:
        raise ValueError("empty ensemble")
    return mean_se(payoff_samples(ensemble, Payoff(f, g), controls))


EXTREME = 1e12


def admissibility_report(
    ensemble: PathEnsemble,
    coeffs: CoefficientSet,
    controls: ControlPair,
    levy: LevyMeasureSpec,
    gen: ChainGenerator,
    payoff: Payoff | None = None,
) -> dict:
    """Sample integrability diagnostics along simulated paths.

    Each entry is the sample mean (with SE) of a per-path time integral
    from the admissibility conditions. ``flags`` lists entries that are
    non-finite or larger than 1e12.
    """
    states = ensemble.require_paths()
    n, K = states.shape[:2]
    grid = ensemble.grid
    u1, u2 = _controls_on_grid(ensemble, controls)
    stepper = _Stepper(coeffs, levy, gen, controls)

    def eta_sq(*args):
        return np.sum(np.asarray(coeffs.eta(*args), dtype=float).reshape(len(args[0]), -1) ** 2, axis=1)

    cols = {k: np.zeros((n, K)) for k in ("int_abs_b", "int_sigma_sq", "int_eta_sq_nu", "int_gamma_sq_mu", "int_u1_sq", "int_u2_sq", "int_abs_f")}
    for k, t in enumerate(grid):
        tt, y, i = np.full(n, t), states[:, k], ensemble.regimes[:, k].astype(np.int64)
        a, c = u1[:, k], u2[:, k]
        cols["int_abs_b"][:, k] = np.linalg.norm(np.asarray(coeffs.b(tt, y, i, a, c)).reshape(n, -1), axis=1)
        if coeffs.sigma is not None:
            cols["int_sigma_sq"][:, k] = np.sum(np.asarray(coeffs.sigma(tt, y, i, a, c)).reshape(n, -1) ** 2, axis=1)
        if coeffs.eta is not None and levy.active:
            cols["int_eta_sq_nu"][:, k] = stepper.nu_integral(eta_sq, tt, y, i, a, c, 1)[:, 0]
        if coeffs.gamma is not None:
            g = np.asarray(coeffs.gamma(tt, y, i, a, c), dtype=float)
            rows = _rates_at(gen, tt)[np.arange(n), i].copy()
            rows[np.arange(n), i] = 0.0
            cols["int_gamma_sq_mu"][:, k] = np.einsum("nd,nd->n", np.sum(g**2, axis=1), rows)
        cols["int_u1_sq"][:, k] = a**2
        cols["int_u2_sq"][:, k] = c**2
        if payoff is not None and payoff.running is not None:
            cols["int_abs_f"][:, k] = np.abs(payoff.running(tt, y, i, a, c))
    report = {}
    for name, vals in cols.items():
        if name == "int_abs_f" and (payoff is None or payoff.running is None):
            continue
        est = mean_se(np.trapezoid(vals, grid, axis=1))
        report[name] = {"mean": est.value, "se": est.se}
    if payoff is not None and payoff.terminal is not None:
        g_abs = np.abs(payoff.terminal(ensemble.terminal, ensemble.terminal_regime.astype(np.int64)))
        est = mean_se(g_abs)
        report["abs_g"] = {"mean": est.value, "se": est.se}
    flags = sorted(k for k, v in report.items() if not np.isfinite(v["mean"]) or abs(v["mean"]) > EXTREME)
    report["flags"] = flags
    return report


def ensemble_rows(ensemble: PathEnsemble, names: list[str], extra: dict[str, np.ndarray] | None = None):
    """Header and rows for a one-row-per-path CSV export (regimes 1-based)."""
    extra = extra or {}
    header = ["path_id", "seed", *[f"{nm}_T" for nm in names], "regime_T", *extra]
    rows = []
    for p in range(ensemble.n_paths):
        row = [p, int(ensemble.seeds[p]), *[repr(float(v)) for v in ensemble.terminal[p]], int(ensemble.terminal_regime[p]) + 1]
        row += [repr(float(col[p])) if np.isfinite(col[p]) else "" for col in extra.values()]
        rows.append(row)
    return header, rows


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        w.writerows(rows)
