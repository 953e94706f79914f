"""Continuous-time finite-state Markov chains.

States are indexed ``0..D-1`` in the Python API (``e_1`` is index 0).
A generator is a (possibly time-dependent) rate matrix ``Q(t)`` whose
off-diagonal entries are nonnegative and whose rows sum to zero.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import (
    DominatingRateNotFound,
    GridTooCoarse,
    GridTooCoarseWarning,
    ModelValidationError,
    NegativeOffDiagonal,
    RowSumViolation,
)
from .rng import path_rng, path_seeds

ROW_SUM_TOL = 1e-12
DEFAULT_VALIDATION_POINTS = 1001

# Gauss-Legendre panel rule used for time-dependent rate integrals.
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(8)


@dataclass(frozen=True, eq=False)
class ChainGenerator:
    """Validated generator on ``[0, T]``.

    ``kind`` is ``"constant"``, ``"piecewise"`` (matrices switching at
    ``starts``) or ``"function"`` (arbitrary callable ``t -> (D, D)``).
    Build instances with :func:`validate_generator`.
    """

    D: int
    T: float
    kind: str
    starts: np.ndarray = field(repr=False)
    matrices: np.ndarray = field(repr=False)
    func: Callable[[float], np.ndarray] | None = field(default=None, repr=False)
    dominating: np.ndarray = field(default=None, repr=False)

    @property
    def homogeneous(self) -> bool:
        return self.kind == "constant"

    @property
    def breakpoints(self) -> np.ndarray:
        """Interior times where a piecewise generator switches matrix."""
        if self.kind != "piecewise":
            return np.empty(0)
        s = self.starts[1:]
        return s[(s > 0) & (s < self.T)]

    def piece_index(self, t):
        if len(self.starts) == 1:
            return 0 if np.ndim(t) == 0 else np.zeros(np.shape(t), dtype=np.intp)
        return np.maximum(np.searchsorted(self.starts, t, side="right") - 1, 0)

    def matrix(self, t: float) -> np.ndarray:
        if self.kind == "function":
            return np.asarray(self.func(float(t)), dtype=float)
        return self.matrices[self.piece_index(t)]

    __call__ = matrix

    def exit_rate(self, t: float, i: int) -> float:
        return -float(self.matrix(t)[i, i])

    def integrated(self, a: float, b: float) -> np.ndarray:
        """Return the matrix integral of ``Q`` over ``[a, b]``."""
        if b <= a:
            return np.zeros((self.D, self.D))
        if self.kind == "constant":
            return self.matrices[0] * (b - a)
        if self.kind == "piecewise":
            edges = np.concatenate([self.starts, [np.inf]])
            out = np.zeros((self.D, self.D))
            for k, q in enumerate(self.matrices):
                lo, hi = max(a, edges[k]), min(b, edges[k + 1])
                if hi > lo:
                    out += q * (hi - lo)
            return out
        panels = max(1, int(np.ceil(256 * (b - a) / self.T)))
        edges = np.linspace(a, b, panels + 1)
        out = np.zeros((self.D, self.D))
        for lo, hi in zip(edges[:-1], edges[1:]):
            half, mid = 0.5 * (hi - lo), 0.5 * (hi + lo)
            for x, w in zip(_GL_NODES, _GL_WEIGHTS):
                out += w * half * self.matrix(mid + half * x)
        return out


def _check_matrix(q: np.ndarray, t: float, tol: float) -> None:
    if not np.all(np.isfinite(q)):
        raise ModelValidationError(f"non-finite generator entries at t={t}")
    off = q - np.diag(np.diag(q))
    if np.any(off < 0):
        i, j = np.argwhere(off < 0)[0]
        raise NegativeOffDiagonal(f"mu[{i},{j}]({t}) = {q[i, j]} < 0")
    rows = q.sum(axis=1)
    bad = np.abs(rows) > tol
    if np.any(bad):
        i = int(np.argmax(bad))
        raise RowSumViolation(f"row {i} of generator sums to {rows[i]} at t={t}")


def validate_generator(
    raw,
    T: float,
    grid_points: int = DEFAULT_VALIDATION_POINTS,
    dominating_rate=None,
    tol: float = ROW_SUM_TOL,
) -> ChainGenerator:
    """Validate a rate matrix and wrap it as a :class:`ChainGenerator`.

    ``raw`` may be a constant ``(D, D)`` matrix, a sequence of
    ``(t_start, matrix)`` pairs (piecewise constant, first start must be 0),
    or a callable ``t -> matrix``. Callables are checked on ``grid_points``
    uniform times; ``dominating_rate`` optionally bounds their exit rates
    (scalar or per state) for thinning.
    """
    if T <= 0:
        raise ModelValidationError("horizon T must be positive")
    grid = np.linspace(0.0, T, grid_points)

    if callable(raw):
        q0 = np.atleast_2d(np.asarray(raw(0.0), dtype=float))
        D = q0.shape[0]
        if q0.shape != (D, D) or D < 1:
            raise ModelValidationError(f"generator must be square, got {q0.shape}")
        exits = np.zeros(D)
        for t in grid:
            q = np.asarray(raw(float(t)), dtype=float)
            _check_matrix(q, float(t), tol)
            exits = np.maximum(exits, -np.diag(q))
        if dominating_rate is None:
            dom = exits * 1.05
        else:
            dom = np.broadcast_to(np.asarray(dominating_rate, dtype=float), (D,)).copy()
        return ChainGenerator(D, float(T), "function", np.zeros(1), q0[None], raw, dom)

    is_pieces = (
        isinstance(raw, (list, tuple))
        and len(raw) > 0
        and isinstance(raw[0], (list, tuple))
        and len(raw[0]) == 2
        and np.ndim(raw[0][1]) == 2
    )
    if is_pieces:
        starts = np.array([float(s) for s, _ in raw])
        mats = np.array([np.asarray(m, dtype=float) for _, m in raw])
        if starts[0] != 0.0:
            raise ModelValidationError("first piecewise generator interval must start at t=0")
        if np.any(np.diff(starts) <= 0):
            raise ModelValidationError("piecewise generator start times must increase")
        kind = "piecewise" if len(starts) > 1 else "constant"
    else:
        mats = np.asarray(raw, dtype=float)[None]
        starts = np.zeros(1)
        kind = "constant"
    if mats.ndim != 3 or mats.shape[1] != mats.shape[2] or mats.shape[1] < 1:
        raise ModelValidationError(f"generator must be square, got shape {mats.shape[1:]}")
    for s, q in zip(starts, mats):
        _check_matrix(q, float(s), tol)
    D = mats.shape[1]
    dom = np.max(-np.diagonal(mats, axis1=1, axis2=2), axis=0)
    return ChainGenerator(D, float(T), kind, starts, mats, None, dom)


@dataclass(frozen=True, eq=False)
class ChainPath:
    """Right-continuous piecewise-constant regime trajectory on ``[0, T]``."""

    initial_state: int
    jump_times: np.ndarray
    jump_targets: np.ndarray
    T: float

    @property
    def n_jumps(self) -> int:
        return len(self.jump_times)

    @property
    def visited(self) -> np.ndarray:
        return np.concatenate([[self.initial_state], self.jump_targets]).astype(int)

    def state_at(self, t):
        """alpha(t), right-continuous."""
        return self.visited[np.searchsorted(self.jump_times, t, side="right")]

    def state_before(self, t):
        """alpha(t-), the left limit."""
        return self.visited[np.searchsorted(self.jump_times, t, side="left")]

    @property
    def terminal_state(self) -> int:
        return int(self.visited[-1])

    def sojourns(self):
        """Yield ``(start, end, state)`` for each holding interval."""
        edges = np.concatenate([[0.0], self.jump_times, [self.T]])
        for k, s in enumerate(self.visited):
            yield float(edges[k]), float(edges[k + 1]), int(s)


def _choose_target(q_row: np.ndarray, i: int, u: float) -> int:
    w = np.clip(q_row, 0.0, None)
    w[i] = 0.0
    cum = np.cumsum(w)
    return int(min(np.searchsorted(cum, u * cum[-1], side="right"), len(w) - 1))


def sample_chain_path(gen: ChainGenerator, initial: int, rng: np.random.Generator) -> ChainPath:
    """Draw an exact chain trajectory on ``[0, T]``.

    Homogeneous generators use exponential holding times and the embedded
    jump chain; time-dependent ones use thinning against the per-state
    dominating exit rate.
    """
    if not 0 <= initial < gen.D:
        raise ModelValidationError(f"initial state {initial} outside 0..{gen.D - 1}")
    times: list[float] = []
    targets: list[int] = []
    t, i = 0.0, int(initial)
    if gen.homogeneous:
        q = gen.matrices[0]
        while True:
            rate = -q[i, i]
            if rate <= 0:
                break
            t += rng.exponential(1.0 / rate)
            if t > gen.T:
                break
            i = _choose_target(q[i], i, rng.random())
            times.append(t)
            targets.append(i)
    else:
        dom = gen.dominating
        if not np.all(np.isfinite(dom)):
            raise DominatingRateNotFound("exit rates are unbounded on [0, T]")
        while True:
            bound = dom[i]
            if bound <= 0:
                break
            t += rng.exponential(1.0 / bound)
            if t > gen.T:
                break
            q = gen.matrix(t)
            rate = -q[i, i]
            if not np.isfinite(rate) or rate > bound * (1 + 1e-12):
                raise DominatingRateNotFound(
                    f"exit rate {rate} of state {i} at t={t} exceeds dominating rate {bound}"
                )
            if rng.random() * bound < rate:
                i = _choose_target(q[i], i, rng.random())
                times.append(t)
                targets.append(i)
    return ChainPath(int(initial), np.asarray(times, dtype=float), np.asarray(targets, dtype=int), gen.T)


def sample_chain_paths(gen: ChainGenerator, initial: int, n_paths: int, seed: int) -> list[ChainPath]:
    return [sample_chain_path(gen, initial, path_rng(s)) for s in path_seeds(seed, n_paths)]


@dataclass(frozen=True, eq=False)
class JumpCounters:
    """Counting processes of one chain path sampled on ``grid``.

    Arrays carry time on the last axis: ``J[i, j, k]`` counts ``i -> j``
    transitions up to ``grid[k]``, ``Phi[j, k]`` counts entries into ``j``,
    ``compensator[j, k]`` is ``mu_j(grid[k])`` and ``compensated`` is their
    difference.
    """

    grid: np.ndarray
    J: np.ndarray
    Phi: np.ndarray
    compensator: np.ndarray

    @property
    def compensated(self) -> np.ndarray:
        return self.Phi - self.compensator


def _cumulative_rates(gen: ChainGenerator, t: np.ndarray) -> np.ndarray:
    """``int_0^t Q(s) ds`` for each entry of ``t``; shape ``(len(t), D, D)``."""
    if gen.kind == "constant":
        return t[:, None, None] * gen.matrices[0][None]
    if gen.kind == "piecewise":
        edges = np.concatenate([gen.starts, [np.inf]])
        out = np.zeros((len(t), gen.D, gen.D))
        for k, q in enumerate(gen.matrices):
            dur = np.clip(t, edges[k], edges[k + 1]) - edges[k]
            out += dur[:, None, None] * q[None]
        return out
    order = np.argsort(t)
    out = np.zeros((len(t), gen.D, gen.D))
    acc, prev = np.zeros((gen.D, gen.D)), 0.0
    for idx in order:
        acc = acc + gen.integrated(prev, float(t[idx]))
        prev = float(t[idx])
        out[idx] = acc
    return out


def jump_counters(path: ChainPath, gen: ChainGenerator, grid, strict: bool = False) -> JumpCounters:
    """Count transitions of ``path`` and integrate their compensators on ``grid``.

    Compensators are integrated exactly between jumps for constant and
    piecewise generators, by Gauss-Legendre quadrature otherwise. If two
    jumps share a grid cell a :class:`GridTooCoarseWarning` is issued, or
    :class:`GridTooCoarse` raised when ``strict``.
    """
    grid = np.asarray(grid, dtype=float)
    D, K = gen.D, len(grid)
    if path.n_jumps > 1:
        cells = np.searchsorted(grid, path.jump_times, side="left")
        if np.any(np.diff(cells) == 0):
            msg = "several chain jumps fall inside one grid cell"
            if strict:
                raise GridTooCoarse(msg)
            warnings.warn(msg, GridTooCoarseWarning, stacklevel=2)

    J = np.zeros((D, D, K))
    visited = path.visited
    for k, tau in enumerate(path.jump_times):
        J[visited[k], visited[k + 1]] += grid >= tau
    Phi = J.sum(axis=0)

    comp = np.zeros((D, K))
    for start, end, i in path.sojourns():
        if start >= grid[-1]:
            break
        clipped = np.clip(grid, start, end)
        inc = _cumulative_rates(gen, clipped)[:, i, :] - _cumulative_rates(gen, np.array([start]))[0, i][None, :]
        inc[:, i] = 0.0
        comp += inc.T
    return JumpCounters(grid, J, Phi, comp)
