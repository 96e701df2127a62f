"""Command-line interface: scenario loading, dispatch, deterministic reports.

Outputs are CSV files with a provenance comment line (scenario name, content
hash, seed) and numbers serialized with 17 significant digits, so identical
invocations produce byte-identical files.  ``--threads`` is accepted as a
scheduling hint only; results never depend on it.

Exit codes: 0 success, 1 verification failure, 2 usage/validation error,
3 numeric failure inside a solver or scheme.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .errors import ParobsError, ScenarioError
from .grid import SpaceTimeGrid
from .problem import validate_hypotheses
from .scenarios import Scenario, load_scenario
from .solver import (
    as_obstacle_solution,
    obstacle_stability,
    penalization_study,
    picard_outer,
    solve_penalized,
    solve_psor,
)
from .stochastic import (
    moment_ratio_probe,
    optimal_stopping_value,
    simulate_paths,
)
from .verify import (
    check_ac_measure,
    check_interval_measure,
    check_measure_identity,
    check_minimality,
    check_representation_u,
    check_representation_z,
    check_skorokhod,
    check_weighted_bounds,
    default_test_functions,
)

ALL_CHECKS = ("representation-u", "representation-z", "measure-identity", "interval-measure",
              "skorokhod", "ac-measure", "weighted-bounds", "minimality")


def _f17(v) -> str:
    return format(float(v), ".17g")


def write_csv(path: Path, provenance: str, header: list, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# {provenance}\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_f17(v) if isinstance(v, (int, float, np.floating)) else str(v)
                              for v in row) + "\n")


def _provenance(sc: Scenario, seed: int) -> str:
    return f"scenario={sc.name} hash={sc.content_hash} seed={seed} units=model"


def _load(args) -> tuple[Scenario, SpaceTimeGrid, int]:
    sc = load_scenario(args.scenario)
    report = validate_hypotheses(sc.spec)
    if not report.passed:
        failing = [e.name for e in report.entries if not e.passed]
        raise ScenarioError(f"scenario {sc.name} fails hypotheses: {failing}")
    grid = SpaceTimeGrid.build(sc.spec, int(sc.grid_params["nx"]), int(sc.grid_params["nt"]))
    seed = args.seed if args.seed is not None else int(sc.mc_params["seed"])
    return sc, grid, seed


_PSOR_TOL_KEYS = ("lcp_tol", "omega", "max_sweeps", "stall_window")
_PENALIZED_TOL_KEYS = ("inner_tol", "max_inner")


def _solver_kwargs(sc: Scenario, keys) -> dict:
    """Scenario tolerance overrides for the matching solver arguments."""
    out = {}
    for key in keys:
        if key in sc.tolerances:
            value = sc.tolerances[key]
            out[key] = int(value) if key in ("max_sweeps", "stall_window", "max_inner") else value
    return out


def _solution_rows(grid, sol):
    for k, t in enumerate(grid.t_nodes):
        for i, x in enumerate(grid.x_nodes):
            yield (t, x, sol.u_values[k, i], sol.r_values[k, i], int(sol.contact_mask[k, i]))


def cmd_solve(args) -> int:
    sc, grid, seed = _load(args)
    out = Path(args.out)
    if args.method == "psor":
        sol = solve_psor(sc.spec, grid, **_solver_kwargs(sc, _PSOR_TOL_KEYS))
        diag_rows = [(k, grid.t_nodes[k], sol.diagnostics["sweep_counts"][k],
                      sol.diagnostics["refine_counts"][k]) for k in range(grid.nt)]
        diag_header = ["step", "t", "psor_sweeps", "driver_refines"]
    elif args.method == "penalized":
        pen = solve_penalized(sc.spec, grid, args.penalty,
                              **_solver_kwargs(sc, _PENALIZED_TOL_KEYS))
        sol = as_obstacle_solution(sc.spec, grid, pen)
        diag_rows = [(k, grid.t_nodes[k], pen.inner_iteration_counts[k], 0)
                     for k in range(grid.nt)]
        diag_header = ["step", "t", "inner_iterations", "unused"]
    else:
        raise ScenarioError(f"unknown method {args.method!r}")
    prov = _provenance(sc, seed) + f" method={args.method}"
    write_csv(out / "solution.csv", prov, ["t", "x", "u", "r", "contact"],
              _solution_rows(grid, sol))
    write_csv(out / "diagnostics.csv", prov, diag_header, diag_rows)
    return 0


def cmd_study(args) -> int:
    sc, grid, seed = _load(args)
    out = Path(args.out)
    prov = _provenance(sc, seed) + f" study={args.study}"
    if args.study == "penalization":
        schedule = [2**j for j in range(4, args.max_level + 1)]
        psor = solve_psor(sc.spec, grid)
        limit, study = penalization_study(sc.spec, grid, schedule, reference=psor)
        rows = []
        for idx, n in enumerate(study.n_levels):
            sup_inc = study.sup_increments[idx - 1] if idx >= 1 else 0.0
            norm_inc = study.norm_increments[idx - 1] if idx >= 1 else 0.0
            rows.append((n, sup_inc, norm_inc, study.distances_to_reference[idx]))
        write_csv(out / "penalization_study.csv", prov,
                  ["n", "sup_increment", "norm_increment", "distance_to_psor"], rows)
    elif args.study == "picard":
        sol, trace = picard_outer(sc.spec, grid)
        rows = [(i + 1, d, trace.ratios[i - 1] if i >= 1 else 0.0)
                for i, d in enumerate(trace.distances)]
        write_csv(out / "picard_study.csv", prov + f" gamma={_f17(trace.gamma)}",
                  ["iteration", "distance", "ratio"], rows)
    elif args.study == "stability":
        eps = args.eps
        h1 = sc.spec.obstacle.h
        h2 = lambda t, x: np.asarray(h1(t, x), dtype=float) + eps
        rep = obstacle_stability(sc.spec, grid, h1, h2)
        write_csv(out / "stability_study.csv", prov,
                  ["eps", "solution_distance", "obstacle_distance", "ratio", "passed"],
                  [(eps, rep.solution_distance, rep.obstacle_distance, rep.ratio,
                    int(rep.passed))])
    else:
        raise ScenarioError(f"unknown study {args.study!r}")
    return 0


def _run_checks(sc: Scenario, grid: SpaceTimeGrid, names, seed: int):
    spec = sc.spec
    cal = sc.calibration
    mc = dict(sc.mc_params)
    mc["seed"] = seed
    prov = {"scenario": sc.name, "hash": sc.content_hash, "nx": grid.nx, "nt": grid.nt,
            "paths": int(mc["paths"]), "seed": seed}
    sol = solve_psor(spec, grid, **_solver_kwargs(sc, _PSOR_TOL_KEYS))
    probe_x = 0.5 * (spec.x_lo + spec.x_hi)
    ens_cache = []

    def ens():
        if not ens_cache:
            ens_cache.append(simulate_paths(spec, 0.0, probe_x, float(mc["dt_path"]),
                                            int(mc["paths"]), seed))
        return ens_cache[0]

    reports = []
    for name in names:
        if name == "representation-u":
            probes = [(0.0, probe_x), (0.25 * spec.T, probe_x),
                      (0.0, probe_x + 0.25 * (spec.x_hi - spec.x_lo) / 2)]
            rep = check_representation_u(spec, grid, probes, mc, sol=sol,
                                         bias_constant=cal.get("fk_bias", 1.0),
                                         provenance=prov)
        elif name == "representation-z":
            rep = check_representation_z(spec, grid, ens(), sol=sol,
                                         basis_degree=int(mc["basis_degree"]),
                                         z_budget=cal.get("z_budget", 0.05), provenance=prov)
        elif name == "measure-identity":
            rep = check_measure_identity(spec, grid, 0.0, probe_x,
                                         default_test_functions(spec), sol=sol,
                                         mc_params=mc, provenance=prov)
        elif name == "interval-measure":
            rep = check_interval_measure(spec, grid, 0.0, spec.T, (spec.x_lo, spec.x_hi),
                                         sol=sol, provenance=prov)
        elif name == "skorokhod":
            rep = check_skorokhod(sol, provenance=prov)
        elif name == "ac-measure":
            rep = check_ac_measure(spec, grid, ens(), sol=sol,
                                   basis_degree=int(mc["basis_degree"]),
                                   residual_budget=cal.get("ac_residual_budget", 0.05),
                                   provenance=prov)
        elif name == "weighted-bounds":
            rep = check_weighted_bounds(spec, grid, bounds=(cal.get("weighted_lo", 0.2),
                                                            cal.get("weighted_hi", 5.0)),
                                        provenance=prov)
        elif name == "minimality":
            rep = check_minimality(spec, grid, [2**j for j in range(4, 13, 2)],
                                   sol_psor=sol, provenance=prov)
        else:
            raise ScenarioError(f"unknown check {name!r}")
        reports.append(rep)
    return reports


def cmd_verify(args) -> int:
    sc, grid, seed = _load(args)
    names = ALL_CHECKS if args.checks == "all" else tuple(args.checks.split(","))
    for name in names:
        if name not in ALL_CHECKS:
            raise ScenarioError(f"unknown check {name!r}; choose from {ALL_CHECKS}")
    reports = _run_checks(sc, grid, names, seed)
    out = Path(args.out)
    prov = _provenance(sc, seed)
    rows = [(r.name, r.discrepancy, r.budget, r.bias_part, r.stat_part, int(r.passed))
            for r in reports]
    write_csv(out / "verify_report.csv", prov,
              ["check", "discrepancy", "budget", "bias_part", "stat_part", "passed"], rows)
    lines = [f"# {prov}"]
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"[{status}] {r.name}: discrepancy={_f17(r.discrepancy)} "
                     f"budget={_f17(r.budget)}")
    text = "\n".join(lines) + "\n"
    out.mkdir(parents=True, exist_ok=True)
    (out / "verify_report.txt").write_text(text)
    sys.stdout.write(text)
    if not all(r.passed for r in reports):
        failing = ",".join(r.name for r in reports if not r.passed)
        sys.stderr.write(f"error: code=1 kind=CheckFailure detail={failing}\n")
        return 1
    return 0


def cmd_simulate(args) -> int:
    sc, grid, seed = _load(args)
    spec = sc.spec
    mc = sc.mc_params
    x0 = 0.5 * (spec.x_lo + spec.x_hi)
    ens = simulate_paths(spec, 0.0, x0, float(mc["dt_path"]), int(mc["paths"]), seed)
    rows = [(t, float(ens.X[k].mean()), float(ens.X[k].var()),
             float(ens.X[k].min()), float(ens.X[k].max()))
            for k, t in enumerate(ens.t_nodes)]
    write_csv(Path(args.out) / "ensemble_summary.csv", _provenance(sc, seed),
              ["t", "mean", "var", "min", "max"], rows)
    return 0


def cmd_stop_value(args) -> int:
    sc, grid, seed = _load(args)
    spec = sc.spec
    sol = solve_psor(spec, grid)
    x0 = 0.5 * (spec.x_lo + spec.x_hi)
    ens = simulate_paths(spec, 0.0, x0, float(sc.mc_params["dt_path"]),
                         int(sc.mc_params["paths"]), seed)
    sv = optimal_stopping_value(spec, grid, sol, ens, 0.0, x0)
    write_csv(Path(args.out) / "stop_value.csv", _provenance(sc, seed),
              ["rule_value", "rule_ci", "snell_value", "gap"],
              [(sv.rule_value, sv.rule_ci, sv.snell_value, sv.gap)])
    return 0


def cmd_moments(args) -> int:
    sc, grid, seed = _load(args)
    spec = sc.spec
    x0 = 0.5 * (spec.x_lo + spec.x_hi)
    ens = simulate_paths(spec, 0.0, x0, float(sc.mc_params["dt_path"]),
                         int(sc.mc_params["paths"]), seed, store_dw=False)
    mr = moment_ratio_probe(ens, args.p)
    write_csv(Path(args.out) / "moments.csv", _provenance(sc, seed),
              ["p", "ratio", "ci", "sup_moment", "terminal_moment"],
              [(mr.p, mr.ratio, mr.ci, mr.sup_moment, mr.terminal_moment)])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="parobs",
                                     description="Obstacle-problem solver and RBSDE cross-checker")
    parser.add_argument("--scenario", required=True, help="path to a scenario .cfg file")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    parser.add_argument("--threads", type=int, default=1,
                        help="scheduling hint; never affects results")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="solve the obstacle problem")
    p.add_argument("--method", choices=("psor", "penalized"), default="psor")
    p.add_argument("--penalty", type=int, default=1024)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("study", help="run a parameter study")
    p.add_argument("--study", required=True, choices=("penalization", "picard", "stability"))
    p.add_argument("--max-level", type=int, default=14, help="top exponent of the 2^j schedule")
    p.add_argument("--eps", type=float, default=1e-3, help="obstacle shift for the stability study")
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("verify", help="run representation/measure checks")
    p.add_argument("--checks", default="all", help="'all' or comma-separated check names")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("simulate", help="simulate the diffusion ensemble")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("stop-value", help="optimal stopping rule vs exhaustive value")
    p.set_defaults(func=cmd_stop_value)

    p = sub.add_parser("moments", help="running-sup moment ratio probe")
    p.add_argument("--p", type=float, default=4.0)
    p.set_defaults(func=cmd_moments)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except (ScenarioError, ValueError, OSError) as exc:
        sys.stderr.write(f"error: code=2 kind={type(exc).__name__} detail={exc}\n")
        return 2
    except ParobsError as exc:
        sys.stderr.write(f"error: code=3 kind={type(exc).__name__} detail={exc}\n")
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
