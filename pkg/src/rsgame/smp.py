"""Maximum-principle checks and Monte Carlo equilibrium tests.

Hamiltonian of player ``k`` at ``(t, y, e_i, u1, u2)`` with adjoints
``(p, q, r, w)``::

    H = f_k + b . p + tr(sigma^T q) + int eta(z) . r(z) nu_i(dz)
        + sum_{j != i} gamma[:, j] . w[:, j] mu_ij(t)

``f_k`` is the player's running payoff; multipliers enter through the
adjoints' terminal conditions. The equilibrium tests replace "for every
admissible deviation" with a finite family of deviations, each scored
against the candidate on common random numbers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import simpson

from .chain import ChainGenerator, validate_generator
from .errors import DomainError
from .game import ConstraintSpec, Game
from .jumpdiff import (
    CoefficientSet,
    ControlPair,
    LevyMeasureSpec,
    NoiseBundle,
    PathEnsemble,
    Payoff,
    QUAD_POINTS,
    mean_se,
    payoff_samples,
)
from .lagrange import lagrangian_objective

FD_REL_STEP = 1e-5
CONCAVITY_STEP = 1e-3
Z_THRESHOLD = 3.0
ROUNDING_FLOOR = 1e-12


# -- Hamiltonian ------------------------------------------------------------------


@dataclass(frozen=True)
class HamiltonianInputs:
    """Arguments of one player's Hamiltonian at a single point.

    ``q`` is ``(N, M)``; ``r`` maps an array of marks ``(m,)`` to ``(m, N)``;
    ``w`` is ``(N, D)`` with the target regime last.
    """

    t: float
    y: np.ndarray
    u1: float
    u2: float
    regime: int
    p: np.ndarray
    q: np.ndarray | None = None
    r: Callable | None = None
    w: np.ndarray | None = None

    def with_control(self, player: int, value: float) -> "HamiltonianInputs":
        from dataclasses import replace

        return replace(self, u1=value) if player == 1 else replace(self, u2=value)


def _one(x) -> np.ndarray:
    return np.atleast_1d(np.asarray(x, dtype=float))


def hamiltonian(player: int, inputs: HamiltonianInputs, game: Game) -> float:
    """Evaluate ``H^player`` at ``inputs``.

    Jump integrals use 64-point quadrature of the regime's mark law.
    Domain problems in the running payoff (such as a logarithm of a
    nonpositive rate) raise :class:`DomainError`.
    """
    c: CoefficientSet = game.coeffs
    x = inputs
    t, i = _one(x.t), np.array([int(x.regime)])
    y = np.asarray(x.y, dtype=float).reshape(1, -1)
    u1, u2 = _one(x.u1), _one(x.u2)
    payoff = game.payoffs[game.payoff_index(player)]
    H = 0.0
    if payoff.running is not None:
        with np.errstate(divide="raise", invalid="raise"):
            try:
                f = np.asarray(payoff.running(t, y, i, u1, u2), dtype=float)
            except FloatingPointError as exc:
                raise DomainError(f"running payoff undefined at u1={x.u1}, u2={x.u2}") from exc
        H += float(f.reshape(-1)[0])
    H += float(np.asarray(c.b(t, y, i, u1, u2), dtype=float).reshape(-1) @ np.asarray(x.p, dtype=float))
    if c.sigma is not None and x.q is not None:
        sig = np.asarray(c.sigma(t, y, i, u1, u2), dtype=float).reshape(c.N, -1)
        H += float(np.sum(sig * np.asarray(x.q, dtype=float)))
    lam_i = game.levy.intensity[x.regime]
    if c.eta is not None and x.r is not None and lam_i > 0:
        z, wts = game.levy.nodes(int(x.regime), QUAD_POINTS)
        m = len(z)
        eta = np.asarray(
            c.eta(np.repeat(t, m), np.repeat(y, m, axis=0), np.repeat(i, m), np.repeat(u1, m), np.repeat(u2, m), z),
            dtype=float,
        ).reshape(m, -1)
        H += float(np.sum(wts * np.sum(eta * np.asarray(x.r(z), dtype=float).reshape(m, -1), axis=1)))
    if c.gamma is not None and x.w is not None:
        g = np.asarray(c.gamma(t, y, i, u1, u2), dtype=float).reshape(c.N, -1)
        mu = game.gen.matrix(float(x.t))[x.regime].copy()
        mu[x.regime] = 0.0
        H += float(np.sum(g * np.asarray(x.w, dtype=float) * mu[None, :]))
    return H


AdjointFn = Callable[[int, float, int, np.ndarray], tuple]


def _inputs(candidate: ControlPair, adjoints: AdjointFn, player: int, t, i, y) -> HamiltonianInputs:
    tt, ii = np.array([t]), np.array([i])
    yy = np.asarray(y, dtype=float).reshape(1, -1)
    u1 = float(np.asarray(candidate.u1(tt, ii, yy)).reshape(-1)[0])
    u2 = float(np.asarray(candidate.u2(tt, ii, yy)).reshape(-1)[0])
    p, q, r, w = adjoints(player, t, i, np.asarray(y, dtype=float))
    return HamiltonianInputs(t, np.asarray(y, dtype=float), u1, u2, i, p, q, r, w)


def _own(inputs: HamiltonianInputs, player: int) -> float:
    return inputs.u1 if player == 1 else inputs.u2


def sample_triples(ensemble: PathEnsemble, n: int, seed: int = 0) -> list[tuple[float, int, np.ndarray]]:
    """Random ``(t, e_i, y)`` points taken from simulated paths."""
    states = ensemble.require_paths()
    rng = np.random.default_rng(seed)
    paths = rng.integers(0, ensemble.n_paths, n)
    steps = rng.integers(0, len(ensemble.grid), n)
    return [
        (float(ensemble.grid[k]), int(ensemble.regimes[p, k]), states[p, k].copy()) for p, k in zip(paths, steps)
    ]


def first_order_residuals(
    game: Game,
    candidate: ControlPair,
    adjoints: AdjointFn,
    samples: Sequence[tuple[float, int, np.ndarray]],
    player: int,
    rel_step: float = FD_REL_STEP,
) -> np.ndarray:
    """Central-difference ``dH/du_own`` at each sample point."""
    out = np.empty(len(samples))
    for n, (t, i, y) in enumerate(samples):
        x = _inputs(candidate, adjoints, player, t, i, y)
        u = _own(x, player)
        h = rel_step * abs(u) if u != 0 else rel_step
        hi = hamiltonian(player, x.with_control(player, u + h), game)
        lo = hamiltonian(player, x.with_control(player, u - h), game)
        out[n] = (hi - lo) / (2 * h)
    return out


def check_first_order(
    game: Game,
    candidate: ControlPair,
    adjoints: AdjointFn,
    samples: Sequence[tuple[float, int, np.ndarray]],
    rel_step: float = FD_REL_STEP,
) -> dict[int, float]:
    """Largest ``|dH^k/du_k|`` over the samples, per player."""
    return {
        k: float(np.max(np.abs(first_order_residuals(game, candidate, adjoints, samples, k, rel_step)), initial=0.0))
        for k in (1, 2)
    }


def second_differences(
    game: Game,
    candidate: ControlPair,
    adjoints: AdjointFn,
    samples: Sequence[tuple[float, int, np.ndarray]],
    player: int,
    step: float = CONCAVITY_STEP,
) -> np.ndarray:
    """Central second difference of ``H^player`` in its own control."""
    out = np.empty(len(samples))
    for n, (t, i, y) in enumerate(samples):
        x = _inputs(candidate, adjoints, player, t, i, y)
        u = _own(x, player)
        mid = hamiltonian(player, x, game)
        hi = hamiltonian(player, x.with_control(player, u + step), game)
        lo = hamiltonian(player, x.with_control(player, u - step), game)
        out[n] = (hi - 2 * mid + lo) / step**2
    return out


# -- deviations -----------------------------------------------------------------------


@dataclass(frozen=True)
class DeviationFamily:
    """Named substitutes for one player's control; the other player is held fixed."""

    player: int
    perturbations: tuple[tuple[str, Callable], ...] = ()

    @classmethod
    def scalings(cls, candidate: ControlPair, player: int, factors=(0.5, 0.8, 1.25, 2.0)) -> "DeviationFamily":
        base = candidate.control(player)
        return cls(player, tuple((f"scale={s:g}", _scaled(base, s)) for s in factors))

    @classmethod
    def offsets(cls, candidate: ControlPair, player: int, shifts) -> "DeviationFamily":
        base = candidate.control(player)
        return cls(player, tuple((f"offset={d:+g}", _shifted(base, d)) for d in shifts))

    @classmethod
    def constants(cls, player: int, values) -> "DeviationFamily":
        return cls(player, tuple((f"const={v:g}", _const(v)) for v in values))

    @classmethod
    def per_regime(cls, candidate: ControlPair, player: int, overrides: Sequence[tuple[int, float]]) -> "DeviationFamily":
        """Replace the control by ``value`` while in regime ``state`` (0-based)."""
        base = candidate.control(player)
        return cls(
            player, tuple((f"regime{s + 1}={v:g}", _override(base, s, v)) for s, v in overrides)
        )

    def __len__(self) -> int:
        return len(self.perturbations)

    def __add__(self, other: "DeviationFamily") -> "DeviationFamily":
        if other.player != self.player:
            raise ValueError("cannot merge deviation families of different players")
        return DeviationFamily(self.player, self.perturbations + other.perturbations)


def _scaled(fn, s):
    return lambda t, i, y=None: s * np.asarray(fn(t, i, y), dtype=float)


def _shifted(fn, d):
    return lambda t, i, y=None: np.asarray(fn(t, i, y), dtype=float) + d


def _const(v):
    return lambda t, i, y=None: np.full(np.shape(i), float(v))


def _override(fn, state, v):
    return lambda t, i, y=None: np.where(np.asarray(i) == state, float(v), fn(t, i, y))


@dataclass(frozen=True)
class DeviationResult:
    player: int
    name: str
    delta: float
    se: float
    z: float
    improving: bool


@dataclass
class EquilibriumVerdict:
    results: list[DeviationResult] = field(default_factory=list)
    z_threshold: float = Z_THRESHOLD

    def passed_player(self, player: int) -> bool:
        return not any(r.improving for r in self.results if r.player == player)

    @property
    def passed(self) -> bool:
        return not any(r.improving for r in self.results)

    @property
    def max_z(self) -> float:
        return max((r.z for r in self.results), default=-np.inf)

    def rows(self) -> tuple[list[str], list[list]]:
        header = ["player", "deviation", "delta_J", "se", "z", "improving"]
        return header, [[r.player, r.name, r.delta, r.se, r.z, r.improving] for r in self.results]

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "passed_player1": self.passed_player(1),
            "passed_player2": self.passed_player(2),
            "z_threshold": self.z_threshold,
            "deviations": [r.__dict__ for r in self.results],
        }


def _z(gain: float, se: float) -> float:
    if se > 0:
        return gain / se
    if abs(gain) <= ROUNDING_FLOOR:
        return 0.0
    return np.inf if gain > 0 else -np.inf


def _deviation_test(
    game: Game,
    candidate: ControlPair,
    families: Sequence[DeviationFamily],
    n_paths: int,
    seed: int,
    z_threshold: float,
    noise: NoiseBundle | None,
) -> EquilibriumVerdict:
    verdict = EquilibriumVerdict(z_threshold=z_threshold)
    if not any(len(f) for f in families):
        return verdict
    noise = noise if noise is not None else game.noise(n_paths, seed)
    base = game.simulate(candidate, noise=noise)
    base_scores: dict[int, np.ndarray] = {}
    for fam in families:
        k = fam.player
        payoff = lagrangian_objective(game, game.multipliers[game.payoff_index(k)], k)
        if k not in base_scores:
            base_scores[k] = payoff_samples(base, payoff, candidate)
        sign = 1.0 if game.maximizes(k) else -1.0
        for name, fn in fam.perturbations:
            dev = candidate.with_control(k, fn)
            ens = game.simulate(dev, noise=noise)
            est = mean_se(payoff_samples(ens, payoff, dev) - base_scores[k])
            gain = sign * est.value
            z = _z(gain, est.se)
            scale = ROUNDING_FLOOR * (1.0 + float(np.mean(np.abs(base_scores[k]))))
            improving = gain > z_threshold * est.se and gain > scale
            verdict.results.append(DeviationResult(k, name, est.value, est.se, z, bool(improving)))
    return verdict


def verify_nash(
    game: Game,
    candidate: ControlPair,
    deviations: Sequence[DeviationFamily],
    n_paths: int = 10_000,
    seed: int = 0,
    z_threshold: float = Z_THRESHOLD,
    noise: NoiseBundle | None = None,
) -> EquilibriumVerdict:
    """Unilateral deviation test on the players' Lagrangian payoffs.

    ``delta`` is ``J_k(deviation) - J_k(candidate)`` estimated path by path
    on shared noise. A deviation is improving when ``delta > z * SE``.
    """
    if game.zero_sum:
        raise ValueError("use verify_saddle for zero-sum games")
    return _deviation_test(game, candidate, deviations, n_paths, seed, z_threshold, noise)


def verify_saddle(
    game: Game,
    candidate: ControlPair,
    deviations: Sequence[DeviationFamily],
    n_paths: int = 10_000,
    seed: int = 0,
    z_threshold: float = Z_THRESHOLD,
    noise: NoiseBundle | None = None,
) -> EquilibriumVerdict:
    """Both saddle inequalities: player 1 cannot raise ``J``, player 2 cannot lower it."""
    if not game.zero_sum:
        raise ValueError("verify_saddle needs a zero-sum game")
    return _deviation_test(game, candidate, deviations, n_paths, seed, z_threshold, noise)


# -- linear-quadratic zero-sum toy --------------------------------------------------------


def lq_saddle_game(
    costs=(1.0,),
    generator=None,
    T: float = 1.0,
    sigma: float = 0.3,
    lam: float = 0.0,
    y0: float = 0.0,
    grid_points: int = 101,
) -> tuple[Game, ControlPair]:
    """Scalar game ``dY = (u1 - u2) dt + sigma dW`` with payoff

    ``J = E[int (-c_i u1^2 / 2 + c_i u2^2 / 2) dt + lam (Y_T - y0)]``.

    Player 1 maximises, player 2 minimises; the saddle is
    ``u1* = u2* = lam / c_i``. Returns the game and its saddle pair.
    """
    costs = np.atleast_1d(np.asarray(costs, dtype=float))
    D = len(costs)
    if np.any(costs <= 0):
        raise ValueError("costs must be positive")
    gen: ChainGenerator = validate_generator(np.zeros((D, D)) if generator is None else generator, T)
    coeffs = CoefficientSet(
        N=1,
        M=1,
        b=lambda t, y, i, u1, u2: (u1 - u2)[:, None],
        sigma=lambda t, y, i, u1, u2: np.full((len(i), 1, 1), sigma),
    )

    def running(t, y, i, u1, u2):
        return 0.5 * costs[i] * (u2**2 - u1**2)

    con = ConstraintSpec("expectation", lambda y, i: y[:, 0] - y0, "E[Y_T] - y0")
    game = Game(
        coeffs,
        LevyMeasureSpec.none(D),
        gen,
        np.array([y0]),
        np.linspace(0.0, T, grid_points),
        (Payoff(running, None),),
        (con,),
        (lam,),
        zero_sum=True,
        names=("Y",),
    )
    saddle = lambda t, i, y=None: lam / costs[np.asarray(i)]  # noqa: E731
    return game, ControlPair(saddle, saddle)


# -- adjoint residuals -------------------------------------------------------------------


@dataclass
class AdjointReport:
    terminal_p2_1: float
    terminal_p2_2: float
    p1_increment: float
    rows: list[dict]
    z_threshold: float = Z_THRESHOLD

    @property
    def passed(self) -> bool:
        return self.terminal_p2_1 <= 1e-12 and self.terminal_p2_2 <= 1e-12 and all(r["passed"] for r in self.rows)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "terminal_max_abs_p2_1_plus_2X2": self.terminal_p2_1,
            "terminal_max_rel_p2_2X2_minus_target": self.terminal_p2_2,
            "p1_max_abs_increment": self.p1_increment,
            "martingale_residuals": self.rows,
        }


def adjoint_residuals(sol, ensemble: PathEnsemble, checkpoints=(0.2, 0.4, 0.6, 0.8), z_threshold: float = Z_THRESHOLD) -> AdjointReport:
    """Check the adjoint ansatz along simulated paths.

    ``sol`` is a solved insurer/bank equilibrium. Terminal identities are
    checked per path; for ``p2_1`` and ``p2_2`` the drift-compensated
    increment ``p(t) - p(0) - int_0^t drift ds`` (trapezoid on the grid)
    should have mean zero at each checkpoint (fractions of ``T``), up to
    z standard errors plus an estimate of the quadrature bias.
    """
    frame = sol.adjoint_frame(ensemble)
    d1, d2 = sol.adjoint_drifts(ensemble, frame)
    X2T = ensemble.terminal[:, 1]
    regT = ensemble.terminal_regime.astype(np.int64)
    term1 = float(np.max(np.abs(frame.p2_1[:, -1] + 2 * X2T)))
    target = sol.lam2 * np.exp(-sol.params.r_tilde[regT])
    term2 = float(np.max(np.abs(frame.p2_2[:, -1] * X2T - target) / np.abs(target)))
    grid = ensemble.grid
    rows = []
    for frac in checkpoints:
        t = frac * sol.T
        k = int(np.argmin(np.abs(grid - t)))
        for name, p, d in (("p2_1", frame.p2_1, d1), ("p2_2", frame.p2_2, d2)):
            trap = np.trapezoid(d[:, : k + 1], grid[: k + 1], axis=1)
            resid = p[:, k] - p[:, 0] - trap
            est = mean_se(resid)
            z = _z(abs(est.value), est.se)
            # quadrature bias of the drift integral, estimated against Simpson's rule;
            # it only matters when the noise (and so the SE) vanishes
            allowance = 2.0 * abs(float(np.mean(trap - simpson(d[:, : k + 1], x=grid[: k + 1], axis=1)))) if k >= 2 else 0.0
            rows.append(
                {
                    "checkpoint": float(grid[k]),
                    "component": name,
                    "mean": est.value,
                    "se": est.se,
                    "z": z,
                    "quadrature_allowance": allowance,
                    "passed": bool(abs(est.value) <= z_threshold * est.se + allowance or abs(est.value) <= ROUNDING_FLOOR),
                }
            )
    return AdjointReport(term1, term2, 0.0, rows, z_threshold)
