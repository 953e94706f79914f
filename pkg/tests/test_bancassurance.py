import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rsgame import bancassurance as bc
from rsgame.chain import sample_chain_paths, validate_generator
from rsgame.errors import (
    DomainError,
    InfeasibleLambda1,
    InfeasibleLambda2,
    ModelValidationError,
    UnsupportedKappa,
)
from rsgame.jumpdiff import ControlPair, LevyMeasureSpec, MarkLaw, mean_se
from rsgame.kolmogorov import transition_matrix
from tests.conftest import collapsed_params

SYM = [[-1.0, 1.0], [1.0, -1.0]]


def two_state(**kw):
    """Symmetric rate-1 two-regime inputs with a regime-dependent discount."""
    args = dict(
        gen=validate_generator(SYM, 1.0),
        p_tilde=1.0,
        a=[0.8, 0.7],
        sigma1=0.1,
        sigma2=[0.2, 0.3],
        levy=LevyMeasureSpec(np.array([0.5, 1.0]), (MarkLaw("uniform", (-0.2, 0.2)), MarkLaw("two_point", (-0.3, 0.4, 0.5)))),
        gamma_claims=0.0,
        h1=[1.0, 16.0],
        h2=[0.5, 1.0],
        kappa1=2.0,
        kappa2=0.5,
        r_tilde=[0.0, 0.1],
        K1=0.5,
        K2=0.1,
        u_surplus=2.0,
        c=1.5,
    )
    args.update(kw)
    return bc.BancassuranceParams(**args)


def occupation(path, D, T):
    """Exact time spent in each regime by a sampled chain path."""
    edges = np.concatenate([[0.0], path.jump_times, [T]])
    return np.bincount(path.visited, weights=np.diff(edges), minlength=D)


@pytest.fixture(scope="module")
def chain_sample():
    p = two_state()
    paths = sample_chain_paths(p.gen, 0, 100_000, seed=31)
    occ = np.array([occupation(path, 2, 1.0) for path in paths])
    end = np.array([path.terminal_state for path in paths])
    return p, occ, end


@pytest.fixture(scope="module")
def bench_ensemble(bench_sol, bench_game):
    return bench_game.simulate(bench_sol.controls(), n_paths=10_000, seed=7)


# -- state system


def test_initial_state_vector():
    p = collapsed_params(u_surplus=2.0, c=1.0)
    np.testing.assert_array_equal(bc.build_system(p)[1], [1.0, 1.0])


def test_x1_frozen_without_net_drift():
    p = two_state(a=1.0, sigma1=0.0)
    coeffs, y0 = bc.build_system(p)
    from rsgame.jumpdiff import simulate_paths

    zero = ControlPair(lambda t, i, y=None: 0.0, lambda t, i, y=None: 0.0)
    ens = simulate_paths(coeffs, p.levy, p.gen, zero, y0, np.linspace(0, 1, 101), 200, seed=4)
    assert np.all(ens.states[:, :, 0] == p.u_surplus - p.c)


def test_x2_lognormal_mean():
    p = collapsed_params(sigma2=0.2)
    coeffs, y0 = bc.build_system(p)
    from rsgame.jumpdiff import simulate_paths

    pair = ControlPair(lambda t, i, y=None: 0.0, lambda t, i, y=None: 0.1)
    ens = simulate_paths(coeffs, p.levy, p.gen, pair, y0, np.linspace(0, 1, 101), 20_000, seed=12, keep_paths=False)
    est = mean_se(ens.terminal[:, 1])
    assert abs(est.value - np.e * np.exp(0.1)) <= 3 * est.se


# -- validation


@pytest.mark.parametrize("k", [0.0, 1.0, -0.5])
def test_kappa_rejected(k):
    with pytest.raises(UnsupportedKappa):
        collapsed_params(kappa1=k)


@pytest.mark.parametrize(
    "kw",
    [
        {"h1": 0.0},
        {"h2": [1.0, -1.0]},
        {"c": 5.0},
        {"levy": LevyMeasureSpec(np.array([1.0]), (MarkLaw("uniform", (-1.5, 0.5)),))},
        {"a": [0.1, 0.2, 0.3]},
    ],
)
def test_invalid_parameters(kw):
    with pytest.raises(ModelValidationError):
        collapsed_params(**kw)


# -- multipliers


def test_lambda2_collapsed():
    parts = bc.lambda2_parts(collapsed_params())
    assert (parts.D1, parts.D2, parts.D3) == pytest.approx((1.0, 1.0, 0.0), abs=1e-12)
    assert parts.value == pytest.approx(2.0, rel=1e-12)
    with pytest.raises(InfeasibleLambda2):
        bc.lambda2(collapsed_params(K2=1.0))


def test_lambda1_collapsed():
    assert bc.lambda1(collapsed_params()) == pytest.approx(25.0, rel=1e-12)
    with pytest.raises(InfeasibleLambda1):
        bc.lambda1(collapsed_params(K1=1.2))


def test_lambda1_against_chain_sample(chain_sample):
    p, occ, _ = chain_sample
    base = p.u_surplus - p.c - p.K1 + occ @ (p.p_tilde.values[0, 0] - p.a.values[0])
    H = occ @ np.sqrt(p.h1.values[0])
    grid = p.quadrature_grid()
    for mc, exact in (
        (mean_se(base), bc.lambda1_base(p, grid)),
        (mean_se(H), bc.lambda1(p, grid) ** 0.5 * bc.lambda1_base(p, grid)),
    ):
        assert abs(mc.value - exact) <= 3 * mc.se


def test_lambda2_parts_against_chain_sample(chain_sample):
    p, occ, end = chain_sample
    disc = np.exp(-p.r_tilde)[end]
    parts = bc.lambda2_parts(p)
    f = -0.5 * p.sigma2.values[0] ** 2 + p.jumps.log_term
    # tower property: the conditional discount inside the integral equals the terminal one
    for mc, exact in (
        (mean_se(disc * np.log(p.c)), parts.D1),
        (mean_se(occ @ p.h2.values[0]), parts.D2),
        (mean_se(disc * (occ @ f)), parts.D3),
    ):
        assert abs(mc.value - exact) <= 3 * max(mc.se, 1e-15)
    assert parts.value == pytest.approx(parts.D2 / (parts.D1 + parts.D3 - p.K2), rel=1e-14)


def test_jump_functionals_by_quadrature():
    p = two_state()
    J = p.jumps
    for k, law in enumerate(p.levy.laws):
        z, w = law.nodes(200)
        lam = p.levy.intensity[k]
        assert J.eta[k] == pytest.approx(lam * w @ z, abs=1e-12)
        assert J.eta_sq[k] == pytest.approx(lam * w @ z**2, abs=1e-12)
        assert J.log_term[k] == pytest.approx(lam * w @ (np.log1p(z) - z), abs=1e-10)
        assert J.eta_sq_over[k] == pytest.approx(lam * w @ (z**2 / (1 + z)), abs=1e-10)


# -- coupled coefficients


def test_a_coefficient_trivial_cases():
    p = two_state(r_tilde=0.0)
    A = bc.a_coefficient(p, 2.0)
    np.testing.assert_allclose(A.values, 2.0, atol=1e-12)
    frozen = two_state(gen=validate_generator(np.zeros((2, 2)), 1.0))
    A = bc.a_coefficient(frozen, 2.0)
    np.testing.assert_allclose(A.values, np.broadcast_to(2.0 * np.exp(-frozen.r_tilde), A.values.shape), atol=1e-12)


def test_a_coefficient_matches_transition_matrix():
    p = two_state()
    A = bc.a_coefficient(p, 2.0, np.linspace(0, 1, 201))
    disc = np.exp(-p.r_tilde)
    for k, t in enumerate(A.grid):
        np.testing.assert_allclose(A.values[k], 2.0 * transition_matrix(p.gen, t, 1.0) @ disc, atol=1e-8)
    for t in np.linspace(0, 1, 5):
        expected = -p.h2.values[0] / (2.0 * transition_matrix(p.gen, t, 1.0) @ disc)
        np.testing.assert_allclose(bc.optimal_rate(p, 2.0, t, np.arange(2), A), expected, atol=1e-8)


def test_optimal_rate_simple_forms():
    p = collapsed_params()
    assert bc.optimal_rate(p, 2.0, 0.3, 0) == pytest.approx(-0.5, abs=1e-12)
    tripled = collapsed_params(h2=3.0)
    assert bc.optimal_rate(tripled, 2.0, 0.3, 0) == pytest.approx(-1.5, abs=1e-12)


def test_phi_scalar_forms():
    sol = bc.solve_equilibrium(collapsed_params())
    assert sol.lam2 == pytest.approx(2.0) and sol.rate(0.0, 0) == pytest.approx(-0.5)
    assert sol.phi.values[0, 0] == pytest.approx(-2 / np.e, abs=1e-8)
    # sigma2 = 1 makes B = 2u + sigma2^2 = 0 exactly when u = -1/2
    flat = bc.solve_equilibrium(collapsed_params(sigma2=1.0, K2=0.0))
    assert flat.lam2 == pytest.approx(2.0, rel=1e-12)
    np.testing.assert_allclose(flat.phi.values, -2.0, atol=1e-12)


def test_phi_discrete_residual(bench_sol, bench_params):
    phi, grid = bench_sol.phi, bench_sol.grid
    Q = bench_params.gen.matrix(0.0)
    h = grid[1] - grid[0]
    dphi = (phi.values[2:] - phi.values[:-2]) / (2 * h)
    inner = grid[1:-1]
    u = bench_sol.rate(inner[:, None], np.arange(2)[None, :])
    B = 2 * u + bench_params.sigma2.values[0] ** 2 + bench_params.jumps.eta_sq
    res = dphi + phi.values[1:-1] * B + phi.values[1:-1] @ Q.T
    assert np.max(np.abs(res)) <= 1e-6


def test_x2_second_moment_against_simulation(bench_sol, bench_ensemble):
    est = mean_se(bench_ensemble.terminal[:, 1] ** 2)
    assert abs(est.value - bench_sol.expected_x2_squared()) <= 3 * est.se


# -- controls


def test_dividend_examples():
    p = collapsed_params()
    assert bc.optimal_dividend(p, 1.0, 0.5, 0) == pytest.approx(1.0)
    assert bc.optimal_dividend(p, 25.0, 0.5, 0) == pytest.approx(0.2)


@settings(max_examples=50, deadline=None)
@given(
    lam=st.floats(1e-3, 1e3),
    factor=st.floats(1.01, 10.0),
    rho=st.floats(0.1, 10.0),
    kappa=st.floats(0.2, 5.0).filter(lambda k: abs(k - 1) > 1e-3),
    t=st.floats(0.0, 1.0),
)
def test_dividend_properties(lam, factor, rho, kappa, t):
    p = two_state(kappa1=kappa)
    scaled = two_state(kappa1=kappa, h1=[rho * 1.0, rho * 16.0])
    i = np.arange(2)
    d = bc.optimal_dividend(p, lam, t, i)
    assert np.all(d > 0)
    assert np.all(bc.optimal_dividend(p, lam * factor, t, i) < d)
    np.testing.assert_allclose(bc.optimal_dividend(scaled, lam, t, i), rho ** (1 / kappa) * d, rtol=1e-12)
    np.testing.assert_allclose(p.h1(t, i) * d ** (-kappa), lam, rtol=1e-10)


def test_signs_on_benchmark(bench_sol):
    assert np.all(bench_sol.A.values > 0)
    t = bench_sol.grid[:, None]
    assert np.all(bench_sol.rate(t, np.arange(2)[None, :]) < 0)


def test_constraint_consistency_collapsed():
    p = collapsed_params()
    sol = bc.solve_equilibrium(p)
    m1, m2 = bc.constraints(p, sol.grid)
    assert m1.deterministic(sol.controls()) == pytest.approx(0.0, abs=1e-12)
    assert m2.deterministic(sol.controls()) == pytest.approx(0.0, abs=1e-12)
    ens = sol.game(np.linspace(0, 1, 101), log_abs_rate=True).simulate(sol.controls(), n_paths=200, seed=1)
    np.testing.assert_allclose(ens.terminal[:, 0], p.K1, atol=1e-12)


def test_constraints_on_benchmark(bench_sol, bench_ensemble):
    m1, m2 = bc.constraints(bench_sol.params, bench_sol.grid)
    for con in (m1, m2):
        assert abs(con.deterministic(bench_sol.controls())) <= 1e-10
        est = mean_se(con.evaluate(bench_ensemble.terminal, bench_ensemble.terminal_regime.astype(np.int64)))
        assert abs(est.value) <= 3 * est.se


def test_expected_payoffs_against_simulation(bench_sol, bench_game, bench_ensemble):
    from rsgame.jumpdiff import evaluate_performance

    J = bench_sol.expected_payoffs()
    for k in range(2):
        pay = bench_game.payoffs[k]
        est = evaluate_performance(bench_ensemble, pay.running, pay.terminal, bench_sol.controls())
        assert abs(est.value - J[k]) <= 3 * est.se


def test_log_rate_domain():
    with pytest.raises(DomainError):
        bc.log_rate(-0.5, False)
    assert bc.log_rate(-0.5, True) == pytest.approx(np.log(0.5))


# -- adjoints


def test_adjoint_terminal_identities(bench_sol, bench_ensemble):
    fr = bench_sol.adjoint_frame(bench_ensemble)
    X2T = bench_ensemble.terminal[:, 1]
    regT = bench_ensemble.terminal_regime.astype(np.int64)
    assert np.all(fr.p2_1[:, -1] + 2 * X2T == 0)
    np.testing.assert_allclose(fr.p2_2[:, -1] * X2T, bench_sol.lam2 * np.exp(-bench_sol.params.r_tilde[regT]), rtol=1e-15)


def test_adjoint_first_order_identity(bench_sol, bench_ensemble):
    fr = bench_sol.adjoint_frame(bench_ensemble)
    grid = bench_ensemble.grid
    reg = bench_ensemble.regimes.astype(np.int64)
    h2 = bench_sol.params.h2(grid[None, :], reg)
    u = bench_sol.rate(grid[None, :], reg)
    X2 = bench_ensemble.states[:, :, 1]
    assert np.max(np.abs(h2 / u + X2 * fr.p2_2)) <= 1e-10


def test_adjoint_zero_components(bench_sol, bench_ensemble):
    fr = bench_sol.adjoint_frame(bench_ensemble)
    assert set(fr.zero_components.values()) == {0.0}
    assert fr.p1_1 == bench_sol.lam1 and fr.p1_2 == bench_sol.params.kappa2
    z = np.array([0.1])
    np.testing.assert_allclose(fr.r2(z), fr.r2_scale * (1 / 1.1 - 1))
    # w components vanish on the own-regime slot
    reg = bench_ensemble.regimes.astype(np.int64)
    own = np.take_along_axis(fr.w1, reg[..., None], axis=2)
    assert np.all(own == 0)
