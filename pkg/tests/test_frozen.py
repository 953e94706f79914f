"""Regression guard: benchmark outputs frozen from an earlier verified run.

The values were produced once, checked against the independent oracles in
the other test modules, and written to ``fixtures/benchmark_frozen.json``.
Any numerical drift in the solver shows up here first.
"""

import json
from pathlib import Path

import numpy as np
import pytest

FROZEN = json.loads((Path(__file__).parent / "fixtures" / "benchmark_frozen.json").read_text())


@pytest.mark.parametrize("key", ["lambda1", "lambda2", "D1", "D2", "D3", "expected_X2_T_squared"])
def test_scalars(bench_sol, key):
    got = {
        "lambda1": bench_sol.lam1,
        "lambda2": bench_sol.lam2,
        "D1": bench_sol.parts2.D1,
        "D2": bench_sol.parts2.D2,
        "D3": bench_sol.parts2.D3,
        "expected_X2_T_squared": bench_sol.expected_x2_squared(),
    }[key]
    assert float(got) == pytest.approx(FROZEN[key], rel=1e-10, abs=1e-14)


def test_tabulated_paths(bench_sol):
    for k, t in enumerate(FROZEN["times"]):
        np.testing.assert_allclose(bench_sol.phi(t), FROZEN["phi"][k], rtol=1e-10)
        np.testing.assert_allclose(bench_sol.A(t), FROZEN["A"][k], rtol=1e-10)
        for i in range(2):
            assert bench_sol.dividend(t, i) == pytest.approx(FROZEN["dividend"][k][i], rel=1e-10)
            assert bench_sol.rate(t, i) == pytest.approx(FROZEN["rate"][k][i], rel=1e-10)
