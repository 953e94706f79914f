import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rsgame.chain import sample_chain_paths, validate_generator
from rsgame.errors import InvalidDistribution, NonFiniteBlowup, TimeOrderViolation
from rsgame.jumpdiff import mean_se
from rsgame.kolmogorov import (
    chain_expectation_integral,
    marginal_law,
    marginal_laws,
    solve_backward_coupled,
    transition_matrix,
)

PIECEWISE = [(0.0, [[-1.0, 1.0], [0.5, -0.5]]), (0.4, [[-2.0, 2.0], [3.0, -3.0]])]


def test_identity_at_equal_times(sym_gen):
    np.testing.assert_array_equal(transition_matrix(sym_gen, 0.3, 0.3), np.eye(2))


def test_time_order(sym_gen):
    with pytest.raises(TimeOrderViolation):
        transition_matrix(sym_gen, 0.5, 0.2)


@pytest.mark.parametrize("method", ["expm", "ode"])
def test_symmetric_closed_form(sym_gen, method):
    P = transition_matrix(sym_gen, 0.0, np.log(2) / 2, method=method)
    assert P[0, 0] == pytest.approx(0.75, abs=1e-8)


def test_function_generator_uses_ode():
    gen = validate_generator(lambda t: np.array([[-1.0, 1.0], [1.0, -1.0]]) * (1 + t), 1.0)
    # int_0^1 (1 + t) dt = 1.5, and the symmetric chain only feels the integrated rate
    P = transition_matrix(gen, 0.0, 1.0)
    assert P[0, 0] == pytest.approx((1 + np.exp(-3.0)) / 2, abs=1e-10)


def test_marginals(sym_gen):
    np.testing.assert_array_equal(marginal_law(sym_gen, [0.3, 0.7], 0.0), [0.3, 0.7])
    zero = validate_generator(np.zeros((2, 2)), 1.0)
    np.testing.assert_allclose(marginal_law(zero, [0.3, 0.7], 0.9), [0.3, 0.7])
    long = validate_generator([[-1.0, 1.0], [1.0, -1.0]], 10.0)
    np.testing.assert_allclose(marginal_law(long, [1.0, 0.0], 10.0), [0.5, 0.5], atol=1e-6)
    with pytest.raises(InvalidDistribution):
        marginal_law(sym_gen, [0.5, 0.6], 0.1)


def test_marginal_laws_match_pointwise():
    gen = validate_generator(PIECEWISE, 1.0)
    grid = np.linspace(0, 1, 26)
    laws = marginal_laws(gen, [1.0, 0.0], grid)
    for k in (0, 7, 25):
        np.testing.assert_allclose(laws[k], marginal_law(gen, [1.0, 0.0], grid[k]), atol=1e-12)


def test_scalar_coupled_solve():
    gen = validate_generator([[0.0]], 1.0)
    v = solve_backward_coupled(gen, 1.0, -2.0)
    assert v.values[0, 0] == pytest.approx(-2 * np.e, abs=1e-8)
    assert v.values[-1, 0] == -2.0


def test_zero_rate_solve_is_transition_expectation():
    gen = validate_generator(PIECEWISE, 1.0)
    g = np.array([1.0, -3.0])
    v = solve_backward_coupled(gen, None, g)
    for k in (0, 500, 1500):
        t = v.grid[k]
        np.testing.assert_allclose(v.values[k], transition_matrix(gen, t, 1.0) @ g, atol=1e-8)


def test_decoupled_when_chain_is_frozen():
    gen = validate_generator(np.zeros((2, 2)), 1.0)
    v = solve_backward_coupled(gen, np.array([0.5, -1.0]), np.array([1.0, 2.0]))
    t = v.grid
    np.testing.assert_allclose(v.values, np.stack([np.exp(0.5 * (1 - t)), 2 * np.exp(-(1 - t))], 1), atol=1e-10)


def test_blowup_guard():
    gen = validate_generator([[0.0]], 1.0)
    with pytest.raises(NonFiniteBlowup):
        solve_backward_coupled(gen, 800.0, 1.0, np.linspace(0, 1, 201))


def test_fourth_order_convergence():
    gen = validate_generator([[0.0]], 1.0)
    b = 3.0
    exact = -2 * np.exp(b)
    errs = [abs(solve_backward_coupled(gen, b, -2.0, np.linspace(0, 1, n + 1)).values[0, 0] - exact) for n in (10, 20, 40)]
    assert errs[0] / errs[1] >= 8 and errs[1] / errs[2] >= 8


def test_interpolation_between_nodes():
    gen = validate_generator([[0.0]], 1.0)
    v = solve_backward_coupled(gen, 1.0, -2.0, np.linspace(0, 1, 201))
    assert v(0.1234, 0) == pytest.approx(-2 * np.exp(1 - 0.1234), rel=1e-9)


def test_expectation_integral_closed_forms(sym_gen):
    assert chain_expectation_integral(sym_gen, [1.0, 0.0], lambda t, i: np.ones_like(i, dtype=float)) == pytest.approx(1.0, abs=1e-12)
    val = chain_expectation_integral(sym_gen, [1.0, 0.0], lambda t, i: (i == 0).astype(float))
    assert val == pytest.approx(0.5 + (1 - np.exp(-2)) / 4, abs=1e-8)


def test_expectation_integral_against_simulation():
    gen = validate_generator(PIECEWISE, 1.0)
    f = lambda t, i: np.where(i == 0, np.sin(3 * t), 1.0 + t**2)  # noqa: E731
    oracle = chain_expectation_integral(gen, [1.0, 0.0], f)
    grid = np.linspace(0, 1, 401)
    vals = []
    for path in sample_chain_paths(gen, 0, 100_000, 17):
        vals.append(np.trapezoid(f(grid, path.state_at(grid)), grid))
    est = mean_se(np.array(vals))
    # trapezoid bias across switch times is O(h) and far below the SE here
    assert abs(est.value - oracle) <= 3 * est.se


@st.composite
def gen_and_times(draw):
    D = draw(st.integers(1, 4))
    off = np.array(draw(st.lists(st.floats(0, 4), min_size=D * D, max_size=D * D))).reshape(D, D)
    np.fill_diagonal(off, 0.0)
    np.fill_diagonal(off, -off.sum(axis=1))
    s, t, u = sorted(draw(st.lists(st.floats(0, 1), min_size=3, max_size=3)))
    return off, s, t, u


@settings(max_examples=60, deadline=None)
@given(data=gen_and_times())
def test_chapman_kolmogorov_and_stochasticity(data):
    q, s, t, u = data
    gen = validate_generator(q, 1.0, tol=1e-9)
    P = transition_matrix(gen, s, u)
    np.testing.assert_allclose(P, transition_matrix(gen, s, t) @ transition_matrix(gen, t, u), atol=1e-8)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-10)
    assert P.min() >= -1e-12
