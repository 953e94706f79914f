"""A controlled two-player game on a regime-switching jump-diffusion.

``Game`` bundles everything needed to simulate the state and score each
player: coefficients, Levy measure, chain generator, initial data, the
simulation grid, the original payoffs ``(f_k, g_k)`` and the terminal
constraint functionals ``M_k`` together with their multipliers.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .chain import ChainGenerator
from .jumpdiff import (
    CoefficientSet,
    ControlPair,
    LevyMeasureSpec,
    NoiseBundle,
    Payoff,
    PathEnsemble,
    simulate_paths,
)
from .rng import path_seeds


@dataclass(frozen=True, eq=False)
class ConstraintSpec:
    """Terminal constraint ``E[M(Y_T, alpha_T)] = 0`` or ``M = 0`` a.s.

    Targets are folded into ``M``. ``deterministic``, when available, maps a
    control pair to the exact value of ``E[M]`` without simulation.
    """

    kind: str
    M: Callable[[np.ndarray, np.ndarray], np.ndarray]
    name: str = "M"
    deterministic: Callable[[ControlPair], float] | None = None

    def __post_init__(self):
        if self.kind not in ("expectation", "almost_sure"):
            raise ValueError(f"constraint kind must be 'expectation' or 'almost_sure', not {self.kind!r}")

    def evaluate(self, y, i) -> np.ndarray:
        out = np.asarray(self.M(y, i), dtype=float)
        return np.broadcast_to(out, (np.shape(y)[0],))


@dataclass(frozen=True, eq=False)
class Game:
    """Model data shared by the verification routines.

    ``payoffs[k]`` is player ``k + 1``'s original ``(f_k, g_k)``;
    ``maximize[k]`` says whether that player maximises. A zero-sum game has
    a single payoff (player 1 maximises it, player 2 minimises it).
    """

    coeffs: CoefficientSet
    levy: LevyMeasureSpec
    gen: ChainGenerator
    y0: np.ndarray
    grid: np.ndarray
    payoffs: tuple[Payoff, ...]
    constraints: tuple[ConstraintSpec | None, ...] = ()
    multipliers: tuple[float, ...] = ()
    initial_state: int = 0
    zero_sum: bool = False
    names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "y0", np.asarray(self.y0, dtype=float).reshape(-1))
        object.__setattr__(self, "grid", np.asarray(self.grid, dtype=float))
        n = 1 if self.zero_sum else 2
        if len(self.payoffs) != n:
            raise ValueError(f"expected {n} payoff(s), got {len(self.payoffs)}")
        if not self.constraints:
            object.__setattr__(self, "constraints", (None,) * n)
        if not self.multipliers:
            object.__setattr__(self, "multipliers", (0.0,) * n)
        if not self.names:
            object.__setattr__(self, "names", tuple(f"Y{k + 1}" for k in range(self.coeffs.N)))

    def payoff_index(self, player: int) -> int:
        return 0 if self.zero_sum else player - 1

    def maximizes(self, player: int) -> bool:
        return not (self.zero_sum and player == 2)

    def with_multipliers(self, *lams: float) -> "Game":
        return replace(self, multipliers=tuple(float(x) for x in lams))

    def noise(self, n_paths: int, seed: int) -> NoiseBundle:
        """Draw a reusable noise bundle (common random numbers)."""
        return NoiseBundle.generate(
            self.gen, self.levy, self.initial_state, self.grid, self.coeffs.M, path_seeds(seed, n_paths)
        )

    def simulate(
        self,
        controls: ControlPair,
        n_paths: int | None = None,
        seed: int = 0,
        noise: NoiseBundle | None = None,
        keep_paths: bool = True,
    ) -> PathEnsemble:
        return simulate_paths(
            self.coeffs,
            self.levy,
            self.gen,
            controls,
            self.y0,
            self.grid,
            n_paths=n_paths,
            seed=seed,
            initial_state=self.initial_state,
            keep_paths=keep_paths,
            noise=noise,
        )
