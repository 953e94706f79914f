from dataclasses import replace

import numpy as np
import pytest

from rsgame import bancassurance as bc
from rsgame.errors import DomainError
from rsgame.jumpdiff import ControlPair, Payoff
from rsgame.smp import (
    DeviationFamily,
    HamiltonianInputs,
    adjoint_residuals,
    check_first_order,
    first_order_residuals,
    hamiltonian,
    lq_saddle_game,
    sample_triples,
    second_differences,
    verify_nash,
    verify_saddle,
)
from tests.conftest import collapsed_params

GRID = np.linspace(0, 1, 101)


@pytest.fixture(scope="module")
def collapsed():
    sol = bc.solve_equilibrium(collapsed_params())
    return sol, sol.game(GRID, log_abs_rate=True)


@pytest.fixture(scope="module")
def bench_samples(bench_sol, bench_game):
    ens = bench_game.simulate(bench_sol.controls(), n_paths=500, seed=99)
    return sample_triples(ens, 120, seed=5)


def zero_adjoints(player, t, i, y):
    return np.zeros(2), np.zeros((2, 2)), (lambda z: np.zeros((len(z), 2))), np.zeros((2, 1))


# -- Hamiltonian


def test_hamiltonian_payoff_only(collapsed):
    _, game = collapsed
    x = HamiltonianInputs(0.3, np.array([1.0, 1.0]), 0.5, -0.5, 0, np.zeros(2))
    assert hamiltonian(1, x, game) == pytest.approx(-2.0, abs=1e-14)


def test_hamiltonian_domain_errors(collapsed):
    _, game = collapsed
    with pytest.raises(DomainError):
        hamiltonian(1, HamiltonianInputs(0.3, np.array([1.0, 1.0]), 0.0, -0.5, 0, np.zeros(2)), game)
    strict = collapsed[0].game(GRID, log_abs_rate=False)
    with pytest.raises(DomainError):
        hamiltonian(2, HamiltonianInputs(0.3, np.array([1.0, 1.0]), 0.5, -0.5, 0, np.zeros(2)), strict)


def test_hamiltonian_matches_hand_expansion(bench_sol, bench_game, bench_params):
    """Every term of H^1 and H^2 written out explicitly for one benchmark point."""
    P = bench_params
    t, i, y = 0.4, 1, np.array([0.7, 1.3])
    d, u = 0.25, -0.3
    for player in (1, 2):
        p, q, r, w = bench_sol.adjoint_point(player, t, i, y)
        x = HamiltonianInputs(t, y, d, u, i, p, q, r, w)
        k = P.kappa1
        f = P.h1(t, i) * d ** (1 - k) / (1 - k) if player == 1 else P.h2(t, i) * np.log(abs(u))
        drift = (P.p_tilde(t, i) - P.a(t, i) - d) * p[0] + y[1] * u * p[1]
        diff = -P.sigma1(t, i) * q[0, 0] + y[1] * P.sigma2(t, i) * q[1, 1]
        z, wts = P.levy.nodes(i, 200)
        jump = np.sum(wts * y[1] * z * r(z)[:, 1])  # wts already carry the intensity
        mu = P.gen.matrix(t)[i].copy()
        mu[i] = 0
        chain = np.sum(-P.gamma_claims(t)[i] * w[0] * mu)
        assert hamiltonian(player, x, bench_game) == pytest.approx(f + drift + diff + jump + chain, rel=1e-12)


# -- first-order and concavity checks


def test_first_order_at_candidate(bench_sol, bench_game, bench_samples):
    res = check_first_order(bench_game, bench_sol.controls(), bench_sol.adjoint_point, bench_samples)
    assert len(bench_samples) >= 100
    assert res[1] <= 1e-6 and res[2] <= 1e-6


def test_first_order_detects_wrong_dividend(bench_sol, bench_game, bench_samples):
    wrong = bench_sol.controls(dividend_scale=1.5)
    res = first_order_residuals(bench_game, wrong, bench_sol.adjoint_point, bench_samples, 1)
    assert np.max(np.abs(res)) >= 0.1 * bench_sol.lam1


def test_first_order_single_state_exact(collapsed):
    _, game = collapsed

    def adj(player, t, i, y):
        return np.array([1.0, 0.0]), None, None, None

    one = ControlPair(lambda t, i, y=None: 1.0, lambda t, i, y=None: -0.5)
    res = first_order_residuals(game, one, adj, [(0.5, 0, np.array([1.0, 1.0]))], 1)
    assert abs(res[0]) <= 1e-9


def test_argmax_invariance(bench_sol, bench_game, bench_samples):
    shifted = tuple(
        Payoff((lambda f: lambda *a: f(*a) + 0.75)(pay.running), pay.terminal) for pay in bench_game.payoffs
    )
    game2 = replace(bench_game, payoffs=shifted)
    for k in (1, 2):
        a = first_order_residuals(bench_game, bench_sol.controls(), bench_sol.adjoint_point, bench_samples, k)
        b = first_order_residuals(game2, bench_sol.controls(), bench_sol.adjoint_point, bench_samples, k)
        # the constant cancels in the difference quotient up to rounding of H + 0.75
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-9)


def test_concavity(bench_sol, bench_game, bench_samples):
    for k in (1, 2):
        sd = second_differences(bench_game, bench_sol.controls(), bench_sol.adjoint_point, bench_samples, k)
        assert len(sd) >= 100 and np.all(sd < 0)
    assert bc.terminal_concavity(bench_sol) == {"player1": True, "player2": True}


# -- deviation tests


def test_empty_family_passes_vacuously(bench_sol, bench_game):
    v = verify_nash(bench_game, bench_sol.controls(), [DeviationFamily(1)], n_paths=100)
    assert v.passed and v.results == [] and v.max_z == -np.inf


def test_nash_small_sample_and_determinism(bench_sol, bench_game):
    cand = bench_sol.controls()
    fams = [DeviationFamily.scalings(cand, 1), DeviationFamily.scalings(cand, 2)]
    a = verify_nash(bench_game, cand, fams, n_paths=1000, seed=11)
    b = verify_nash(bench_game, cand, fams, n_paths=1000, seed=11)
    assert a.passed
    assert [r.delta for r in a.results] == [r.delta for r in b.results]
    assert [r.se for r in a.results] == [r.se for r in b.results]
    header, rows = a.rows()
    assert header[:2] == ["player", "deviation"] and len(rows) == 8
    assert a.to_dict()["passed_player2"] is True


def test_nash_rejects_inflated_dividend(bench_sol, bench_game):
    wrong = bench_sol.controls(dividend_scale=10.0)
    fams = [DeviationFamily.scalings(wrong, 1, (0.1, 0.5))]
    v = verify_nash(bench_game, wrong, fams, n_paths=1000, seed=2)
    assert not v.passed and not v.passed_player(1) and v.max_z > 3
    assert v.passed_player(2)


def test_family_combinators(bench_sol):
    cand = bench_sol.controls()
    fam = DeviationFamily.scalings(cand, 1, (2.0,)) + DeviationFamily.offsets(cand, 1, (0.1,)) + DeviationFamily.per_regime(cand, 1, [(1, 0.3)])
    assert [name for name, _ in fam.perturbations] == ["scale=2", "offset=+0.1", "regime2=0.3"]
    t, i = np.array([0.2, 0.2]), np.array([0, 1])
    base = cand.u1(t, i)
    np.testing.assert_allclose(fam.perturbations[0][1](t, i), 2 * base)
    np.testing.assert_allclose(fam.perturbations[1][1](t, i), base + 0.1)
    np.testing.assert_allclose(fam.perturbations[2][1](t, i), [base[0], 0.3])
    with pytest.raises(ValueError):
        fam + DeviationFamily.constants(2, (1.0,))


def test_zero_sum_dispatch(bench_sol, bench_game):
    game, saddle = lq_saddle_game()
    with pytest.raises(ValueError):
        verify_nash(game, saddle, [])
    with pytest.raises(ValueError):
        verify_saddle(bench_game, bench_sol.controls(), [])


def _toy_families(cand, values=(-1.0, -0.3, 0.3, 1.0)):
    return [DeviationFamily.constants(1, values), DeviationFamily.constants(2, values)]


def test_lq_saddle_at_zero():
    game, saddle = lq_saddle_game()
    v = verify_saddle(game, saddle, _toy_families(saddle), n_paths=2000, seed=1)
    assert v.passed
    # both inequalities hold strictly: every deviation hurts its player
    assert all(r.delta < 0 if r.player == 1 else r.delta > 0 for r in v.results)


def test_lq_saddle_rejects_wrong_candidate():
    game, saddle = lq_saddle_game()
    wrong = saddle.with_control(1, lambda t, i, y=None: np.ones(np.shape(i)))
    v = verify_saddle(game, wrong, [DeviationFamily.constants(1, (0.0,))], n_paths=2000, seed=1)
    assert not v.passed and v.max_z > 3


def test_lq_saddle_with_multiplier_and_regimes():
    game, saddle = lq_saddle_game(costs=(1.0, 4.0), generator=[[-2.0, 2.0], [1.0, -1.0]], lam=0.8)
    t, i = np.zeros(2), np.array([0, 1])
    np.testing.assert_allclose(saddle.u1(t, i), [0.8, 0.2])
    fams = [
        DeviationFamily.per_regime(saddle, 1, [(0, 0.0), (0, 1.6), (1, 0.0), (1, 0.6)]),
        DeviationFamily.per_regime(saddle, 2, [(0, 0.0), (0, 1.6), (1, 0.0), (1, 0.6)]),
        DeviationFamily.scalings(saddle, 1) + DeviationFamily.offsets(saddle, 1, (-0.2, 0.2)),
    ]
    assert verify_saddle(game, saddle, fams, n_paths=2000, seed=4).passed
    wrong = saddle.with_control(2, lambda t, i, y=None: np.zeros(np.shape(i)))
    v = verify_saddle(game, wrong, [DeviationFamily.constants(2, (0.5,))], n_paths=2000, seed=4)
    assert not v.passed_player(2) and v.passed_player(1)


def test_lq_rejects_bad_costs():
    with pytest.raises(ValueError):
        lq_saddle_game(costs=(1.0, 0.0))


# -- adjoint residuals


def test_adjoint_report(bench_sol, bench_game):
    ens = bench_game.simulate(bench_sol.controls(), n_paths=2000, seed=17)
    rep = adjoint_residuals(bench_sol, ens)
    assert rep.terminal_p2_1 == 0.0 and rep.terminal_p2_2 <= 1e-15
    assert rep.p1_increment == 0.0
    assert len(rep.rows) == 8 and rep.passed
    d = rep.to_dict()
    assert d["passed"] and {r["component"] for r in d["martingale_residuals"]} == {"p2_1", "p2_2"}


def test_adjoint_report_detects_wrong_drift(bench_sol, bench_game):
    """Dropping the volatility term from the drift of p2_1 is caught."""
    ens = bench_game.simulate(bench_sol.controls(), n_paths=4000, seed=17)
    frame = bench_sol.adjoint_frame(ens)
    d1, _ = bench_sol.adjoint_drifts(ens, frame)
    reg = ens.regimes.astype(np.int64)
    wrong = d1 + frame.p2_1 * bench_sol.params.sigma2(ens.grid[None, :], reg) ** 2
    resid = frame.p2_1[:, -1] - frame.p2_1[:, 0] - np.trapezoid(wrong, ens.grid, axis=1)
    from rsgame.jumpdiff import mean_se

    est = mean_se(resid)
    assert abs(est.value) > 3 * est.se
