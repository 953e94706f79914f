"""Insurer/bank dividend and appreciation-rate game.

State ``(X1, X2)``: the insurer's surplus net of the commission paid to the
bank, and the bank's wealth grown from that commission::

    dX1 = (p(t) - a(t, i) - delta) dt - sigma1(t, i) dW1 - gamma^{ij}(t) dPhi~_j
    dX2 = X2 (u dt + sigma2(t, i) dW2 + int z N~_i(dt, dz)),   X(0) = (u0 - c, c)

Player 1 (insurer) picks the dividend rate ``delta`` and maximises
``E[int h1 delta^(1-k1)/(1-k1) dt - X2(T)^2]`` subject to
``E[X1(T)] = K1``. Player 2 (bank) picks ``u`` and maximises
``E[int h2 ln u dt + k2 X1(T)]`` subject to
``E[exp(-r(alpha_T)) ln X2(T)] = K2``.

States are 0-based here; configuration files and CSV output are 1-based.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .chain import ChainGenerator
from .errors import (
    DomainError,
    InfeasibleLambda1,
    InfeasibleLambda2,
    ModelValidationError,
    NonpositiveX2,
    UnsupportedKappa,
)
from .game import ConstraintSpec, Game
from .jumpdiff import CoefficientSet, ControlPair, LevyMeasureSpec, MarkLaw, PathEnsemble, Payoff
from .kolmogorov import (
    CoupledValue,
    chain_expectation_integral,
    default_grid,
    initial_law,
    marginal_law,
    solve_backward_coupled,
)


def _pick(table: np.ndarray, i) -> np.ndarray:
    """``table[..., i]`` with the leading axes broadcast against ``i``."""
    i = np.asarray(i)
    shape = np.broadcast_shapes(table.shape[:-1], i.shape)
    table = np.broadcast_to(table, shape + table.shape[-1:])
    return np.take_along_axis(table, np.broadcast_to(i, shape)[..., None], axis=-1)[..., 0]


# -- time tables ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TimeTable:
    """Piecewise-constant-in-time table.

    ``values[k]`` applies on ``[starts[k], starts[k+1])``. For per-state
    coefficients ``values`` has shape ``(P, D)`` (or ``(P, 1)`` when the
    coefficient does not depend on the regime); claim tables have shape
    ``(P, D, D)``.
    """

    starts: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        starts = np.atleast_1d(np.asarray(self.starts, dtype=float))
        values = np.asarray(self.values, dtype=float)
        if values.shape[0] != len(starts):
            raise ModelValidationError("time table needs one row of values per start time")
        if starts[0] != 0.0 or np.any(np.diff(starts) <= 0):
            raise ModelValidationError("time table starts must begin at 0 and increase")
        if not np.all(np.isfinite(values)):
            raise ModelValidationError("time table values must be finite")
        object.__setattr__(self, "starts", starts)
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, values) -> "TimeTable":
        v = np.atleast_1d(np.asarray(values, dtype=float))
        return cls(np.zeros(1), v[None])

    @classmethod
    def coerce(cls, raw) -> "TimeTable":
        """Accept a table, a scalar, a per-state list, or ``[(t_start, values), ...]``."""
        if isinstance(raw, TimeTable):
            return raw
        if (
            isinstance(raw, (list, tuple))
            and raw
            and isinstance(raw[0], (list, tuple))
            and len(raw[0]) == 2
            and np.ndim(raw[0][0]) == 0
            and np.ndim(raw[0][1]) >= 1
        ):
            return cls(np.array([s for s, _ in raw], dtype=float), np.array([np.atleast_1d(v) for _, v in raw]))
        return cls.constant(raw)

    @property
    def breakpoints(self) -> np.ndarray:
        return self.starts[1:]

    def piece(self, t):
        if len(self.starts) == 1:
            return 0 if np.ndim(t) == 0 else np.zeros(np.shape(t), dtype=np.intp)
        return np.maximum(np.searchsorted(self.starts, t, side="right") - 1, 0)

    def __call__(self, t, i=None):
        """Value at time(s) ``t`` for regime(s) ``i``; broadcasts."""
        row = self.values[self.piece(t)]
        if i is None:
            return row
        if self.values.shape[-1] == 1 and self.values.ndim == 2:
            return row[..., 0] * np.ones(np.shape(i))
        if np.ndim(row) == 1:
            return row[i]
        return _pick(row, i)

    def check_states(self, D: int, name: str) -> None:
        cols = self.values.shape[-1]
        if self.values.ndim != 2 or cols not in (1, D):
            raise ModelValidationError(f"{name} needs 1 or {D} columns, got shape {self.values.shape[1:]}")

    def min(self) -> float:
        return float(self.values.min())


# -- jump functionals ---------------------------------------------------------------


def _law_functionals(law: MarkLaw) -> dict[str, float]:
    """Closed-form means of ``z``, ``z^2``, ``ln(1+z) - z`` and ``z^2 / (1+z)``."""
    p = law.params
    if law.kind == "two_point":
        z, w = np.array(p[:2], dtype=float), np.array([p[2], 1.0 - p[2]])
        keep = w > 0
        z, w = z[keep], w[keep]
        return {
            "z": float(w @ z),
            "z2": float(w @ z**2),
            "log": float(w @ (np.log1p(z) - z)),
            "z2_over": float(w @ (z**2 / (1.0 + z))),
        }
    if law.kind == "uniform":
        lo, hi = p
        span = hi - lo

        def G(x):  # antiderivative of ln(1 + x)
            return (1.0 + x) * np.log1p(x) - x

        mean = 0.5 * (lo + hi)
        return {
            "z": mean,
            "z2": (hi**3 - lo**3) / (3.0 * span),
            "log": (G(hi) - G(lo)) / span - mean,
            "z2_over": mean - 1.0 + (np.log1p(hi) - np.log1p(lo)) / span,
        }
    m, s = p
    e1 = np.exp(m + 0.5 * s * s)
    return {
        "z": e1 - 1.0,
        "z2": np.exp(2 * m + 2 * s * s) - 2 * e1 + 1.0,
        "log": m - (e1 - 1.0),
        "z2_over": e1 - 2.0 + np.exp(-m + 0.5 * s * s),
    }


@dataclass(frozen=True)
class JumpFunctionals:
    """Per-regime ``nu``-integrals of the jump coefficient ``eta = z``."""

    eta: np.ndarray
    eta_sq: np.ndarray
    log_term: np.ndarray
    eta_sq_over: np.ndarray

    @classmethod
    def of(cls, levy: LevyMeasureSpec) -> "JumpFunctionals":
        rows = [_law_functionals(law) for law in levy.laws]
        lam = levy.intensity
        return cls(*(lam * np.array([r[k] for r in rows]) for k in ("z", "z2", "log", "z2_over")))


# -- parameters ---------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BancassuranceParams:
    gen: ChainGenerator
    p_tilde: TimeTable
    a: TimeTable
    sigma1: TimeTable
    sigma2: TimeTable
    levy: LevyMeasureSpec
    gamma_claims: TimeTable
    h1: TimeTable
    h2: TimeTable
    kappa1: float
    kappa2: float
    r_tilde: np.ndarray
    K1: float
    K2: float
    u_surplus: float
    c: float
    initial_state: int = 0

    def __post_init__(self):
        D = self.gen.D
        for name in ("p_tilde", "a", "sigma1", "sigma2", "h1", "h2", "gamma_claims"):
            object.__setattr__(self, name, TimeTable.coerce(getattr(self, name)))
        for name in ("a", "sigma1", "sigma2", "h1", "h2"):
            getattr(self, name).check_states(D, name)
        if self.p_tilde.values.shape[1:] != (1,):
            raise ModelValidationError("p_tilde depends on time only")
        claims = self.gamma_claims
        if claims.values.ndim == 2 and claims.values.shape[1] == 1 and np.all(claims.values == 0):
            claims = TimeTable(claims.starts, np.zeros((len(claims.starts), D, D)))
            object.__setattr__(self, "gamma_claims", claims)
        if claims.values.shape[1:] != (D, D):
            raise ModelValidationError(f"gamma_claims must be {D}x{D} per time piece")
        r = np.broadcast_to(np.asarray(self.r_tilde, dtype=float), (D,)).copy()
        object.__setattr__(self, "r_tilde", r)
        if self.levy.D != D:
            raise ModelValidationError(f"jump law given for {self.levy.D} regimes, chain has {D}")
        if self.h1.min() <= 0 or self.h2.min() <= 0:
            raise ModelValidationError("h1 and h2 must be strictly positive")
        if self.kappa1 <= 0:
            raise UnsupportedKappa("kappa1 must be > 0 (kappa1 = 0 makes the dividend rule degenerate)")
        if self.kappa1 == 1:
            raise UnsupportedKappa("kappa1 = 1 is excluded")
        if self.u_surplus <= 0 or not 0 < self.c < self.u_surplus:
            raise ModelValidationError("need u > 0 and 0 < c < u")
        if not 0 <= self.initial_state < D:
            raise ModelValidationError(f"initial state {self.initial_state} outside 0..{D - 1}")
        for k, law in enumerate(self.levy.laws):
            if self.levy.intensity[k] > 0 and law.kind != "lognormal" and law.support_min() <= -1.0:
                raise ModelValidationError(f"marks in regime {k + 1} must satisfy 1 + z > 0")
        if not np.all(np.isfinite([self.kappa2, self.K1, self.K2, *r])):
            raise ModelValidationError("non-finite scalar parameter")

    @property
    def D(self) -> int:
        return self.gen.D

    @property
    def T(self) -> float:
        return self.gen.T

    @property
    def y0(self) -> np.ndarray:
        return np.array([self.u_surplus - self.c, self.c])

    @cached_property
    def jumps(self) -> JumpFunctionals:
        return JumpFunctionals.of(self.levy)

    @property
    def p0(self) -> np.ndarray:
        return initial_law(self.D, self.initial_state)

    def quadrature_grid(self, points: int | None = None) -> np.ndarray:
        """Uniform grid refined with every coefficient breakpoint."""
        base = default_grid(self.T, points) if points else default_grid(self.T)
        cuts = [self.gen.breakpoints]
        for name in ("p_tilde", "a", "sigma2", "h1", "h2"):
            cuts.append(getattr(self, name).breakpoints)
        extra = np.concatenate(cuts) if cuts else np.empty(0)
        extra = extra[(extra > 0) & (extra < self.T)]
        return np.unique(np.concatenate([base, extra]))


# -- state system -----------------------------------------------------------------


def build_system(params: BancassuranceParams) -> tuple[CoefficientSet, np.ndarray]:
    """Coefficients of the ``(X1, X2)`` system; controls are ``u1 = delta``, ``u2 = u``."""
    P = params
    J = P.jumps

    def b(t, y, i, d, u):
        return np.stack([P.p_tilde(t, i) - P.a(t, i) - d, y[:, 1] * u], axis=1)

    def sigma(t, y, i, d, u):
        out = np.zeros((len(i), 2, 2))
        out[:, 0, 0] = -P.sigma1(t, i)
        out[:, 1, 1] = y[:, 1] * P.sigma2(t, i)
        return out

    def eta(t, y, i, d, u, z):
        return np.stack([np.zeros(len(i)), y[:, 1] * z], axis=1)

    def eta_nu(t, y, i, d, u):
        return np.stack([np.zeros(len(i)), y[:, 1] * J.eta[i]], axis=1)

    def gamma(t, y, i, d, u):
        out = np.zeros((len(i), 2, P.D))
        claims = P.gamma_claims(t)
        rows = claims[i] if claims.ndim == 2 else claims[np.arange(len(i)), i]
        out[:, 0, :] = -rows
        return out

    has_claims = bool(np.any(P.gamma_claims.values != 0))
    coeffs = CoefficientSet(
        N=2,
        M=2,
        b=b,
        sigma=sigma,
        eta=eta if P.levy.active else None,
        gamma=gamma if has_claims else None,
        multiplicative=(False, True),
        eta_nu=eta_nu,
    )
    return coeffs, P.y0


# -- closed forms -------------------------------------------------------------------


def _state_fn(table: TimeTable, D: int):
    return lambda t, i: table(t, i)


def discount_weights(params: BancassuranceParams, grid=None) -> CoupledValue:
    """``w(t, e_i) = E[exp(-r(alpha_T)) | alpha(t) = e_i]``."""
    grid = params.quadrature_grid() if grid is None else grid
    return solve_backward_coupled(params.gen, None, np.exp(-params.r_tilde), grid)


@dataclass(frozen=True)
class Lambda2Parts:
    D1: float
    D2: float
    D3: float
    value: float


def lambda2_parts(params: BancassuranceParams, grid=None, w: CoupledValue | None = None) -> Lambda2Parts:
    P = params
    grid = P.quadrature_grid() if grid is None else np.asarray(grid)
    w = discount_weights(P, grid) if w is None else w
    lawT = marginal_law(P.gen, P.p0, P.T)
    D1 = float(lawT @ np.exp(-P.r_tilde)) * np.log(P.c)
    D2 = chain_expectation_integral(P.gen, P.p0, lambda t, i: P.h2(t, i), grid)
    jl = P.jumps.log_term
    D3 = chain_expectation_integral(
        P.gen, P.p0, lambda t, i: w(t, i) * (-0.5 * P.sigma2(t, i) ** 2 + jl[i]), grid
    )
    denom = D1 + D3 - P.K2
    if D2 <= 0 or denom <= 0:
        raise InfeasibleLambda2(f"D1 + D3 - K2 = {denom:.6g}, D2 = {D2:.6g}; need both > 0")
    return Lambda2Parts(D1, D2, D3, D2 / denom)


def lambda2(params: BancassuranceParams, grid=None) -> float:
    return lambda2_parts(params, grid).value


def a_coefficient(params: BancassuranceParams, lam2: float, grid=None) -> CoupledValue:
    """``A(t, e_i) = lam2 * E[exp(-r(alpha_T)) | alpha(t) = e_i]``."""
    w = discount_weights(params, grid)
    return CoupledValue(w.grid, lam2 * w.values, lam2 * w.derivatives)


def optimal_rate(params: BancassuranceParams, lam2: float, t, i, A: CoupledValue | None = None):
    """``u*(t, e_i) = -h2(t, e_i) / A(t, e_i)``."""
    if A is None:
        A = a_coefficient(params, lam2)
    return -params.h2(t, i) / A(t, i)


def _phi_rate(params: BancassuranceParams, A: CoupledValue):
    P = params
    states = np.arange(P.D)
    j2 = P.jumps.eta_sq

    def B(t):
        u = -P.h2(t, states) / A(t)
        return 2 * u + P.sigma2(t, states) ** 2 + j2

    return B


def phi_coefficient(params: BancassuranceParams, lam2: float, grid=None, A: CoupledValue | None = None) -> CoupledValue:
    """Solve ``phi' + B phi + sum_j (phi_j - phi_i) mu_ij = 0``, ``phi(T) = -2``."""
    grid = params.quadrature_grid() if grid is None else grid
    if A is None:
        A = a_coefficient(params, lam2, grid)
    return solve_backward_coupled(params.gen, _phi_rate(params, A), -2.0, grid)


def lambda1_base(params: BancassuranceParams, grid=None) -> float:
    P = params
    grid = P.quadrature_grid() if grid is None else grid
    drift = chain_expectation_integral(P.gen, P.p0, lambda t, i: P.p_tilde(t, i) - P.a(t, i), grid)
    return P.u_surplus - P.c - P.K1 + drift


def lambda1(params: BancassuranceParams, grid=None) -> float:
    P = params
    grid = P.quadrature_grid() if grid is None else grid
    base = lambda1_base(P, grid)
    if base <= 0:
        raise InfeasibleLambda1(f"u - c - K1 + E[int (p - a) dt] = {base:.6g} must be > 0")
    k = P.kappa1
    H = chain_expectation_integral(P.gen, P.p0, lambda t, i: P.h1(t, i) ** (1.0 / k), grid)
    return base ** (-k) * H**k


def optimal_dividend(params: BancassuranceParams, lam1: float, t, i):
    """``delta*(t, e_i) = (lam1 / h1(t, e_i))^(-1/kappa1)``."""
    return (lam1 / params.h1(t, i)) ** (-1.0 / params.kappa1)


# -- payoffs and constraints ------------------------------------------------------------


def log_rate(u, log_abs_rate: bool):
    u = np.asarray(u, dtype=float)
    if log_abs_rate:
        if np.any(u == 0):
            raise DomainError("ln|u| is undefined at u = 0")
        return np.log(np.abs(u))
    if np.any(u <= 0):
        raise DomainError(
            "ln(u) needs u > 0 but the rate is nonpositive; set log_abs_rate to score ln|u|"
        )
    return np.log(u)


def payoffs(params: BancassuranceParams, log_abs_rate: bool = False) -> tuple[Payoff, Payoff]:
    P = params
    k1 = P.kappa1

    def f1(t, y, i, d, u):
        d = np.asarray(d, dtype=float)
        if np.any(d <= 0):
            raise DomainError("dividend rate must be positive")
        return P.h1(t, i) * d ** (1 - k1) / (1 - k1)

    def g1(y, i):
        return -y[:, 1] ** 2

    def f2(t, y, i, d, u):
        return P.h2(t, i) * log_rate(u, log_abs_rate)

    def g2(y, i):
        return P.kappa2 * y[:, 0]

    return Payoff(f1, g1), Payoff(f2, g2)


def _require_open_loop(controls: ControlPair) -> None:
    from .errors import BackendUnavailable

    if controls.state_feedback:
        raise BackendUnavailable("deterministic residuals need controls that ignore the state")


def constraints(params: BancassuranceParams, grid=None) -> tuple[ConstraintSpec, ConstraintSpec]:
    """``M1 = X1 - K1`` and ``M2 = exp(-r(alpha_T)) ln X2 - K2`` with exact evaluators."""
    P = params
    grid = P.quadrature_grid() if grid is None else np.asarray(grid)
    discount = np.exp(-P.r_tilde)

    def M1(y, i):
        return y[:, 0] - P.K1

    def M2(y, i):
        if np.any(y[:, 1] <= 0):
            raise NonpositiveX2("X2 must stay positive")
        return discount[i] * np.log(y[:, 1]) - P.K2

    def det1(controls: ControlPair) -> float:
        _require_open_loop(controls)
        drift = chain_expectation_integral(
            P.gen, P.p0, lambda t, i: P.p_tilde(t, i) - P.a(t, i) - controls.u1(t, i, None), grid
        )
        return P.u_surplus - P.c + drift - P.K1

    w_cache: dict = {}

    def det2(controls: ControlPair) -> float:
        _require_open_loop(controls)
        if "w" not in w_cache:
            w_cache["w"] = discount_weights(P, grid)
        w = w_cache["w"]
        D1 = float(marginal_law(P.gen, P.p0, P.T) @ discount) * np.log(P.c)
        jl = P.jumps.log_term
        rest = chain_expectation_integral(
            P.gen,
            P.p0,
            lambda t, i: w(t, i) * (controls.u2(t, i, None) - 0.5 * P.sigma2(t, i) ** 2 + jl[i]),
            grid,
        )
        return D1 + rest - P.K2

    return (
        ConstraintSpec("expectation", M1, "E[X1(T)] - K1", det1),
        ConstraintSpec("expectation", M2, "E[exp(-r) ln X2(T)] - K2", det2),
    )


# -- adjoint ansatz ---------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class AdjointFrame:
    """Adjoint components along simulated paths, shape ``(n, K)`` unless noted.

    Only the nonzero components are stored; ``p1_1`` and ``p1_2`` are the
    constants ``lambda1`` and ``kappa2``. Jump components are affine in a
    per-path scale: ``r_1(z) = r1_scale * z`` and
    ``r_2(z) = r2_scale * ((1 + z)^-1 - 1)``. ``w1``/``w2`` have shape
    ``(n, K, D)`` with the target regime last.
    """

    grid: np.ndarray
    p1_1: float
    p2_1: np.ndarray
    q1_22: np.ndarray
    r1_scale: np.ndarray
    w1: np.ndarray
    p1_2: float
    p2_2: np.ndarray
    q2_22: np.ndarray
    r2_scale: np.ndarray
    w2: np.ndarray

    def r1(self, z):
        return self.r1_scale * z

    def r2(self, z):
        return self.r2_scale * (1.0 / (1.0 + z) - 1.0)

    # components that the ansatz sets to zero, exposed for completeness
    @property
    def zero_components(self) -> dict[str, float]:
        return {f"q{k}_{ab}": 0.0 for k in (1, 2) for ab in ("11", "12", "21")} | {
            "r1_1": 0.0, "r2_1": 0.0, "w1_1": 0.0, "w2_1": 0.0
        }


@dataclass(eq=False)
class EquilibriumSolution:
    """Closed-form multipliers, coupled coefficients and the Nash controls."""

    params: BancassuranceParams
    lam1: float
    lam2: float
    A: CoupledValue
    phi: CoupledValue
    w: CoupledValue
    parts2: Lambda2Parts
    grid: np.ndarray = field(repr=False)

    @property
    def T(self) -> float:
        return self.params.T

    def dividend(self, t, i, y=None):
        return optimal_dividend(self.params, self.lam1, t, i)

    def rate(self, t, i, y=None):
        return -self.params.h2(t, i) / self.A(t, i)

    def controls(self, dividend_scale: float = 1.0, rate_scale: float = 1.0) -> ControlPair:
        """The Nash pair, optionally with each control scaled (for power checks)."""
        d, r = self.dividend, self.rate
        u1 = d if dividend_scale == 1.0 else (lambda t, i, y=None: dividend_scale * d(t, i))
        u2 = r if rate_scale == 1.0 else (lambda t, i, y=None: rate_scale * r(t, i))
        return ControlPair(u1, u2)

    def controls_at(self, lam1: float | None = None, lam2: float | None = None) -> ControlPair:
        """Unconstrained best responses at trial multipliers (defaults: the solved ones)."""
        P, w = self.params, self.w
        l1 = self.lam1 if lam1 is None else lam1
        l2 = self.lam2 if lam2 is None else lam2
        return ControlPair(
            lambda t, i, y=None: optimal_dividend(P, l1, t, i),
            lambda t, i, y=None: -P.h2(t, i) / (l2 * w(t, i)),
        )

    def game(self, grid, log_abs_rate: bool = False) -> Game:
        coeffs, y0 = build_system(self.params)
        return Game(
            coeffs,
            self.params.levy,
            self.params.gen,
            y0,
            grid,
            payoffs(self.params, log_abs_rate),
            constraints(self.params, self.grid),
            (self.lam1, self.lam2),
            self.params.initial_state,
            names=("X1", "X2"),
        )

    # -- adjoints
    def adjoint_point(self, player: int, t: float, i: int, y):
        """``(p, q, r, w)`` for one player at a single ``(t, e_i, y)``.

        ``r`` is a callable ``z -> (2,)``; ``w`` has shape ``(2, D)``.
        """
        P = self.params
        x2 = float(y[1])
        if x2 <= 0:
            raise NonpositiveX2("X2 must be positive")
        s2 = float(P.sigma2(t, i))
        w = np.zeros((2, P.D))
        q = np.zeros((2, 2))
        if player == 1:
            ph = self.phi(t)
            p = np.array([self.lam1, ph[i] * x2])
            q[1, 1] = ph[i] * x2 * s2
            w[1] = (ph - ph[i]) * x2
            return p, q, (lambda z: np.stack([np.zeros_like(z), ph[i] * x2 * z], axis=-1)), w
        a = self.A(t)
        p = np.array([P.kappa2, a[i] / x2])
        q[1, 1] = -a[i] * s2 / x2
        w[1] = (a - a[i]) / x2
        return p, q, (lambda z: np.stack([np.zeros_like(z), a[i] / x2 * (1 / (1 + z) - 1)], axis=-1)), w

    def adjoint_frame(self, ensemble: PathEnsemble) -> AdjointFrame:
        P = self.params
        X = ensemble.require_paths()
        X2 = X[:, :, 1]
        if np.any(X2 <= 0):
            raise NonpositiveX2("X2 must be positive on every path")
        grid = ensemble.grid
        reg = ensemble.regimes.astype(np.int64)
        ph_all = self.phi(grid)  # (K, D)
        A_all = self.A(grid)
        # Terminal slices come straight from the tabulated terminal condition.
        ph_all[-1] = self.phi.values[-1]
        A_all[-1] = self.A.values[-1]
        K = len(grid)
        cols = np.arange(K)[None, :]
        ph = ph_all[cols, reg]
        A = A_all[cols, reg]
        s2 = P.sigma2(grid[None, :], reg)
        return AdjointFrame(
            grid=grid,
            p1_1=self.lam1,
            p2_1=ph * X2,
            q1_22=ph * X2 * s2,
            r1_scale=ph * X2,
            w1=(ph_all[None, :, :] - ph[..., None]) * X2[..., None],
            p1_2=P.kappa2,
            p2_2=A / X2,
            q2_22=-A * s2 / X2,
            r2_scale=A / X2,
            w2=(A_all[None, :, :] - A[..., None]) / X2[..., None],
        )

    def adjoint_drifts(self, ensemble: PathEnsemble, frame: AdjointFrame | None = None):
        """Drifts of ``p2_1`` and ``p2_2`` implied by the adjoint equations."""
        P = self.params
        frame = frame or self.adjoint_frame(ensemble)
        grid = ensemble.grid
        reg = ensemble.regimes.astype(np.int64)
        u = self.rate(grid[None, :], reg)
        s2 = P.sigma2(grid[None, :], reg) ** 2
        J = P.jumps
        d1 = -frame.p2_1 * (u + s2 + J.eta_sq[reg])
        d2 = -frame.p2_2 * (u - s2 - J.eta_sq_over[reg])
        return d1, d2

    # -- deterministic payoff values
    def expected_x2_squared(self) -> float:
        """``E[X2(T)^2] = -c^2 phi(0, e_i0) / 2`` (Feynman-Kac)."""
        return -self.params.c**2 * float(self.phi.values[0, self.params.initial_state]) / 2.0

    def expected_payoffs(self, log_abs_rate: bool = True) -> tuple[float, float]:
        """Exact ``(J1, J2)`` at the Nash pair, via chain quadratures."""
        P = self.params
        k = P.kappa1
        run1 = chain_expectation_integral(
            P.gen, P.p0, lambda t, i: P.h1(t, i) * self.dividend(t, i) ** (1 - k) / (1 - k), self.grid
        )
        run2 = chain_expectation_integral(
            P.gen, P.p0, lambda t, i: P.h2(t, i) * log_rate(self.rate(t, i), log_abs_rate), self.grid
        )
        return run1 - self.expected_x2_squared(), run2 + P.kappa2 * P.K1


def solve_equilibrium(params: BancassuranceParams, grid_points: int | None = None) -> EquilibriumSolution:
    """Run the closed-form pipeline: lambda2, A, u*, phi, lambda1, delta*."""
    grid = params.quadrature_grid(grid_points)
    w = discount_weights(params, grid)
    parts = lambda2_parts(params, grid, w)
    A = CoupledValue(w.grid, parts.value * w.values, parts.value * w.derivatives)
    phi = phi_coefficient(params, parts.value, grid, A)
    lam1 = lambda1(params, grid)
    return EquilibriumSolution(params, lam1, parts.value, A, phi, w, parts, grid)


def terminal_concavity(sol: EquilibriumSolution) -> dict[str, bool]:
    """Structural concavity of ``g_k + lambda_k M_k`` in the terminal state.

    ``g1 + lam1 M1 = -x2^2 + lam1 (x1 - K1)`` is always concave;
    ``g2 + lam2 M2 = k2 x1 + lam2 exp(-r) ln x2 - lam2 K2`` is concave on
    ``x2 > 0`` exactly when ``lam2 >= 0``.
    """
    return {"player1": True, "player2": bool(sol.lam2 >= 0)}
