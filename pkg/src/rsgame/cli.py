"""Command-line entry point: ``rsgame solve | simulate | verify``.

Exit codes: 0 on success (including a verification run whose verdict is
``passed: false``), 1 on runtime failures, 2 on invalid input.
"""

from __future__ import annotations

import json
import math
import sys
from importlib import metadata
from pathlib import Path

import click
import numpy as np
import scipy

from . import bancassurance as bc
from . import lagrange, smp
from .config import RunConfig, build_params, load_config
from .errors import DomainError, ModelValidationError, RSGameError
from .jumpdiff import Estimate, admissibility_report, ensemble_rows, mean_se, payoff_samples, write_csv

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2


# -- output helpers ------------------------------------------------------------------------


def _clean(x):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(x, Estimate):
        return {"value": _clean(x.value), "se": _clean(x.se)}
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else ("inf" if x > 0 else "-inf" if x < 0 else "nan")
    return x


def write_json(path: Path, data: dict) -> None:
    text = json.dumps(_clean(data), indent=2, sort_keys=True, ensure_ascii=False)
    path.write_text(text + "\n", encoding="utf-8", newline="\n")


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v)) if math.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan")
    return v


def _write_rows(path: Path, header, rows) -> None:
    write_csv(path, header, [[_fmt(v) for v in row] for row in rows])


def _table_rows(values: np.ndarray, grid: np.ndarray):
    return [[repr(float(t)), i + 1, repr(float(values[k, i]))] for k, t in enumerate(grid) for i in range(values.shape[1])]


def _provenance(cfg: RunConfig) -> dict:
    try:
        version = metadata.version("artifact")
    except metadata.PackageNotFoundError:  # pragma: no cover
        version = "unknown"
    return {
        "config_sha256": cfg.digest(),
        "seed": cfg.simulation.seed,
        "n_paths": cfg.simulation.n_paths,
        "versions": {"package": version, "numpy": np.__version__, "scipy": scipy.__version__},
    }


def _out_dir(cfg: RunConfig, out: str | None) -> Path:
    path = Path(out or cfg.output.directory)
    path.mkdir(parents=True, exist_ok=True)
    return path


# -- pipelines ---------------------------------------------------------------------------------


def _solve(cfg: RunConfig):
    params = build_params(cfg)
    sol = bc.solve_equilibrium(params, cfg.simulation.solver_grid_points)
    return params, sol


def run_solve(cfg: RunConfig, out: Path) -> dict:
    params, sol = _solve(cfg)
    grid = sol.grid
    states = np.arange(params.D)
    dividend = np.array([sol.dividend(t, states) for t in grid])
    rate = np.array([sol.rate(t, states) for t in grid])
    header = ["t", "state_index", "value"]
    _write_rows(out / "phi.csv", header, _table_rows(sol.phi.values, grid))
    _write_rows(out / "A.csv", header, _table_rows(sol.A.values, grid))
    _write_rows(out / "dividend.csv", header, _table_rows(dividend, grid))
    _write_rows(out / "rate.csv", header, _table_rows(rate, grid))
    summary = {
        "lambda1": sol.lam1,
        "lambda2": sol.lam2,
        "lambda1_base": bc.lambda1_base(params, grid),
        "D1": sol.parts2.D1,
        "D2": sol.parts2.D2,
        "D3": sol.parts2.D3,
        "expected_X2_T_squared": sol.expected_x2_squared(),
        "initial_dividend": [float(v) for v in dividend[0]],
        "initial_rate": [float(v) for v in rate[0]],
        "terminal_concavity": bc.terminal_concavity(sol),
        "tables": ["A.csv", "dividend.csv", "phi.csv", "rate.csv"],
        "provenance": _provenance(cfg),
    }
    write_json(out / "summary.json", summary)
    return summary


def _contributions(game, ens, controls, log_abs_rate: bool):
    j1 = payoff_samples(ens, game.payoffs[0], controls)
    try:
        j2 = payoff_samples(ens, game.payoffs[1], controls)
        conflict = None
    except DomainError as exc:
        j2, conflict = np.full(ens.n_paths, np.nan), str(exc)
    return j1, j2, conflict


def run_simulate(cfg: RunConfig, out: Path) -> dict:
    params, sol = _solve(cfg)
    v = cfg.verification
    grid = np.linspace(0.0, params.T, cfg.simulation.grid_points)
    game = sol.game(grid, v.log_abs_rate)
    controls = sol.controls(v.dividend_scale, v.rate_scale)
    ens = game.simulate(controls, n_paths=cfg.simulation.n_paths, seed=cfg.simulation.seed)
    j1, j2, conflict = _contributions(game, ens, controls, v.log_abs_rate)
    header, rows = ensemble_rows(ens, ["X1", "X2"], {"J1_contrib": j1, "J2_contrib": j2})
    write_csv(out / "paths.csv", header, rows)
    regT = ens.terminal_regime.astype(np.int64)
    m1, m2 = game.constraints
    diag = {
        "admissibility": admissibility_report(ens, game.coeffs, controls, game.levy, game.gen, game.payoffs[0]),
        "mean_X1_T": mean_se(ens.terminal[:, 0]),
        "mean_X2_T": mean_se(ens.terminal[:, 1]),
        "K1": params.K1,
        "K2": params.K2,
        "constraint1_residual": mean_se(m1.evaluate(ens.terminal, regT)),
        "constraint2_residual": mean_se(m2.evaluate(ens.terminal, regT)),
        "J1": mean_se(j1),
        "J2": mean_se(j2) if conflict is None else None,
        "domain_conflict": conflict,
        "lambda1": sol.lam1,
        "lambda2": sol.lam2,
        "provenance": _provenance(cfg),
    }
    write_json(out / "diagnostics.json", diag)
    return diag


def _within(est: Estimate, z: float) -> bool:
    return abs(est.value) <= z * est.se or abs(est.value) <= 1e-12


def run_verify(cfg: RunConfig, out: Path) -> dict:
    params, sol = _solve(cfg)
    v, s = cfg.verification, cfg.simulation
    z = v.z_threshold
    grid = np.linspace(0.0, params.T, s.grid_points)
    game = sol.game(grid, v.log_abs_rate)
    candidate = sol.controls(v.dividend_scale, v.rate_scale)
    m1, m2 = game.constraints
    checks: dict[str, bool] = {}

    # multipliers by root-finding, compared with the closed forms
    trace_rows = []
    roots = {}
    for player, con, make, exact in (
        (1, m1, lambda lam: sol.controls_at(lam1=lam), sol.lam1),
        (2, m2, lambda lam: sol.controls_at(lam2=lam), sol.lam2),
    ):
        res = lagrange.solve_multiplier(game, make, con, tol=v.multiplier_tolerance)
        rel = abs(res.lam / exact - 1.0)
        roots[f"lambda{player}"] = {
            "closed_form": exact,
            "root": res.lam,
            "relative_error": rel,
            "iterations": res.iterations,
            "residual": res.residual,
        }
        checks[f"lambda{player}_root"] = rel <= v.multiplier_rel_tolerance
        trace_rows += [[player, *row] for row in res.trace_rows()[1]]
    _write_rows(
        out / "lambda_trace.csv", ["player", "iteration", "lambda_lo", "lambda_hi", "lambda", "residual", "se"], trace_rows
    )

    # constraint residuals at the candidate, both backends, on shared noise
    noise = game.noise(s.n_paths, s.seed)
    ens = game.simulate(candidate, noise=noise)
    regT = ens.terminal_regime.astype(np.int64)
    residuals = {}
    for name, con in (("constraint1", m1), ("constraint2", m2)):
        det = lagrange.constraint_residual(game, con, candidate, "deterministic")
        mc = mean_se(con.evaluate(ens.terminal, regT))
        residuals[name] = {"name": con.name, "deterministic": det.value, "monte_carlo": mc}
        checks[f"{name}_deterministic"] = abs(det.value) <= 1e-8
        checks[f"{name}_monte_carlo"] = _within(mc, z)

    # first-order and concavity checks at sampled states
    samples = smp.sample_triples(ens, v.fo_samples, s.seed)
    first_order, conflict = {}, None
    for player in (1, 2):
        try:
            fo = smp.first_order_residuals(game, candidate, sol.adjoint_point, samples, player)
            sd = smp.second_differences(game, candidate, sol.adjoint_point, samples, player)
            first_order[f"player{player}"] = {
                "max_abs_derivative": float(np.max(np.abs(fo))),
                "max_second_difference": float(np.max(sd)),
            }
            checks[f"first_order_player{player}"] = float(np.max(np.abs(fo))) <= v.fo_tolerance
            checks[f"concavity_player{player}"] = float(np.max(sd)) < 0
        except DomainError as exc:
            conflict = str(exc)
            first_order[f"player{player}"] = {"domain_conflict": conflict}
            checks[f"first_order_player{player}"] = False

    # unilateral deviations
    fams = [smp.DeviationFamily.scalings(candidate, 1, v.deviation_scalings)]
    if conflict is None:
        fams.append(smp.DeviationFamily.scalings(candidate, 2, v.deviation_scalings))
    verdict = smp.verify_nash(game, candidate, fams, seed=s.seed, z_threshold=z, noise=noise)
    _write_rows(out / "deviations.csv", *verdict.rows())
    checks["nash_player1"] = verdict.passed_player(1)
    checks["nash_player2"] = verdict.passed_player(2) and conflict is None

    # adjoint ansatz along the candidate paths
    adj = smp.adjoint_residuals(sol, ens, v.checkpoints, z)
    _write_rows(
        out / "adjoint_residuals.csv",
        ["checkpoint", "component", "mean", "se", "z", "quadrature_allowance", "passed"],
        [[r[k] for k in ("checkpoint", "component", "mean", "se", "z", "quadrature_allowance", "passed")] for r in adj.rows],
    )
    checks["adjoint_terminal"] = adj.terminal_p2_1 <= 1e-12 and adj.terminal_p2_2 <= 1e-12
    checks["adjoint_martingale"] = all(r["passed"] for r in adj.rows)
    conc = bc.terminal_concavity(sol)
    checks["terminal_concavity"] = all(conc.values())

    j1, j2, pay_conflict = _contributions(game, ens, candidate, v.log_abs_rate)
    report = {
        "passed": all(checks.values()),
        "checks": checks,
        "lambda1": sol.lam1,
        "lambda2": sol.lam2,
        "multiplier_search": roots,
        "constraint_residuals": residuals,
        "payoffs": {
            "J1": mean_se(j1),
            "J2": mean_se(j2) if pay_conflict is None else None,
            "J1_deterministic_at_nash": sol.expected_payoffs(True)[0],
            "J2_deterministic_at_nash": sol.expected_payoffs(True)[1] if v.log_abs_rate else None,
        },
        "first_order": first_order,
        "domain_conflict": conflict or pay_conflict,
        "equilibrium": verdict.to_dict(),
        "adjoint": adj.to_dict(),
        "terminal_concavity": conc,
        "candidate": {"dividend_scale": v.dividend_scale, "rate_scale": v.rate_scale},
        "appendices": ["adjoint_residuals.csv", "deviations.csv", "lambda_trace.csv"],
        "provenance": _provenance(cfg),
    }
    write_json(out / "report.json", report)
    return report


# -- click wiring ---------------------------------------------------------------------------


def _common(fn):
    fn = click.option("--paths", "n_paths", type=click.IntRange(min=1), default=None, help="Override simulation.n_paths.")(fn)
    fn = click.option("--seed", type=click.IntRange(0, 2**64 - 1), default=None, help="Override the master seed.")(fn)
    fn = click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory.")(fn)
    fn = click.option("--config", "config_path", type=click.Path(dir_okay=False), required=True, help="JSON config file.")(fn)
    return fn


def _run(runner, config_path, out, seed, n_paths) -> None:
    try:
        cfg = load_config(config_path, seed, n_paths)
        result = runner(cfg, _out_dir(cfg, out))
    except ModelValidationError as exc:
        click.echo(f"invalid input: {exc}", err=True)
        sys.exit(EXIT_INVALID)
    except (RSGameError, ArithmeticError, ValueError, OSError) as exc:
        click.echo(f"runtime failure: {type(exc).__name__}: {exc}", err=True)
        sys.exit(EXIT_RUNTIME)
    if isinstance(result, dict) and "passed" in result:
        click.echo(f"passed: {str(result['passed']).lower()}")
    sys.exit(EXIT_OK)


@click.group()
def main() -> None:
    """Solve and verify the regime-switching insurer/bank game."""


@main.command()
@_common
def solve(config_path, out, seed, n_paths):
    """Closed-form multipliers and coefficient tables."""
    _run(run_solve, config_path, out, seed, n_paths)


@main.command()
@_common
def simulate(config_path, out, seed, n_paths):
    """Simulate the state under the equilibrium controls."""
    _run(run_simulate, config_path, out, seed, n_paths)


@main.command()
@_common
def verify(config_path, out, seed, n_paths):
    """Run every verification and write a report."""
    _run(run_verify, config_path, out, seed, n_paths)


if __name__ == "__main__":  # pragma: no cover
    main()
