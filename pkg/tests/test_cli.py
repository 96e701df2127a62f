import numpy as np
import pytest

from parobs.cli import main
from parobs.errors import ScenarioError
from parobs.scenarios import load_scenario

from conftest import scenario_path


def run(args):
    return main([str(a) for a in args])


def test_solve_constant_psor(tmp_path):
    code = run(["--scenario", scenario_path("constant"), "--out", tmp_path, "solve",
                "--method", "psor"])
    assert code == 0
    lines = (tmp_path / "solution.csv").read_text().splitlines()
    assert lines[0].startswith("# scenario=constant hash=")
    assert lines[1] == "t,x,u,r,contact"
    body = np.array([row.split(",") for row in lines[2:]], dtype=float)
    assert np.all(body[:, 2] == 1.0)
    assert np.all(body[:, 3] == 0.0)
    assert (tmp_path / "diagnostics.csv").exists()


def test_solve_penalized_writes_measure_field(tmp_path):
    code = run(["--scenario", scenario_path("obstacle_quad"), "--out", tmp_path,
                "--seed", 7, "solve", "--method", "penalized", "--penalty", 1024])
    assert code == 0
    lines = (tmp_path / "solution.csv").read_text().splitlines()
    body = np.array([row.split(",") for row in lines[2:]], dtype=float)
    interior = body[np.abs(body[:, 1]) < 5.9]
    # exact-oracle regression: u = 1 - x^2 to O(1/n), r = 1
    assert np.max(np.abs(interior[:, 2] - (1.0 - interior[:, 1] ** 2))) <= 2e-3
    active = interior[interior[:, 0] < 0.5]
    assert np.quantile(np.abs(active[:, 3] - 1.0), 0.95) <= 1e-2


def test_missing_scenario_exits_2(tmp_path, capsys):
    code = run(["--scenario", tmp_path / "nope.cfg", "--out", tmp_path, "solve"])
    assert code == 2
    assert "code=2" in capsys.readouterr().err


def test_unknown_study_exits_2(tmp_path):
    code = run(["--scenario", scenario_path("constant"), "--out", tmp_path,
                "study", "--study", "nonsense"])
    assert code == 2


def test_unknown_check_exits_2(tmp_path):
    code = run(["--scenario", scenario_path("constant"), "--out", tmp_path,
                "verify", "--checks", "bogus"])
    assert code == 2


def test_numeric_failure_exits_3(tmp_path):
    bad = tmp_path / "stiff.cfg"
    bad.write_text(
        "scenario.name = stiff\n"
        "problem.family = american-put\n"
        "problem.strike = 1.0\n"
        "problem.rate = 2000.0\n"
        "problem.sigma = 0.3\n"
        "problem.T = 0.5\n"
        "problem.x_lo = -2.0\n"
        "problem.x_hi = 2.0\n"
        "problem.alpha = 1.0\n"
        "grid.nx = 20\n"
        "grid.nt = 5\n"
    )
    # PSOR regularizes the stiff driver (u = h is the true solution), but the
    # penalized inner fixed point genuinely oscillates at dt L >> 1
    code = run(["--scenario", bad, "--out", tmp_path / "o", "solve",
                "--method", "penalized", "--penalty", 1024])
    assert code == 3


def test_scenario_parser_rejects_garbage(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("problem.family = constant\nproblem.T = 1\nbogus.key = 1\n")
    with pytest.raises(ScenarioError):
        load_scenario(p)
    p.write_text("problem.family = constant\nproblem.T = 1\nproblem.T = 2\n")
    with pytest.raises(ScenarioError):
        load_scenario(p)
    p.write_text("problem.family = constant\nproblem.T = 1\nproblem.x_lo = -1\n"
                 "problem.x_hi = 1\nproblem.nonsense = 3\n")
    with pytest.raises(ScenarioError):
        load_scenario(p)


def test_penalization_study_csv(tmp_path):
    code = run(["--scenario", scenario_path("constant"), "--out", tmp_path,
                "study", "--study", "penalization", "--max-level", 6])
    assert code == 0
    lines = (tmp_path / "penalization_study.csv").read_text().splitlines()
    assert lines[1] == "n,sup_increment,norm_increment,distance_to_psor"
    rows = np.array([r.split(",") for r in lines[2:]], dtype=float)
    assert rows.shape[0] == 1  # short-circuits at the first level
    assert np.all(rows[:, 1:] == 0.0)


def test_stability_study_csv(tmp_path):
    code = run(["--scenario", scenario_path("heat_bump"), "--out", tmp_path,
                "study", "--study", "stability", "--eps", 1e-3])
    assert code == 0
    txt = (tmp_path / "stability_study.csv").read_text().splitlines()
    row = txt[2].split(",")
    assert float(row[3]) <= 3.0  # ratio within the configured constant
    assert int(float(row[4])) == 1


def test_verify_subset_and_exit_codes(tmp_path):
    code = run(["--scenario", scenario_path("obstacle_quad"), "--out", tmp_path,
                "verify", "--checks", "skorokhod,interval-measure,minimality"])
    assert code == 0
    report = (tmp_path / "verify_report.txt").read_text()
    assert report.count("[PASS]") == 3


def test_simulate_and_moments_and_stop_value(tmp_path):
    assert run(["--scenario", scenario_path("constant"), "--out", tmp_path, "simulate"]) == 0
    summary = (tmp_path / "ensemble_summary.csv").read_text().splitlines()
    assert summary[1] == "t,mean,var,min,max"
    assert run(["--scenario", scenario_path("constant"), "--out", tmp_path,
                "moments", "--p", 4]) == 0
    assert (tmp_path / "moments.csv").exists()
    assert run(["--scenario", scenario_path("constant"), "--out", tmp_path,
                "stop-value"]) == 0
    row = (tmp_path / "stop_value.csv").read_text().splitlines()[2].split(",")
    assert float(row[0]) == pytest.approx(1.0, abs=1e-12)
    assert float(row[3]) <= 1e-12


def test_outputs_byte_identical_across_threads(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out, threads in ((a, 1), (b, 8)):
        code = run(["--scenario", scenario_path("obstacle_quad"), "--out", out,
                    "--threads", threads, "verify",
                    "--checks", "skorokhod,measure-identity,minimality"])
        assert code == 0
    for name in ("verify_report.csv", "verify_report.txt"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_unknown_flag_exits_2(tmp_path):
    assert run(["--scenario", scenario_path("constant"), "--out", tmp_path,
                "solve", "--definitely-not-a-flag"]) == 2


def test_tolerance_overrides_reach_the_solver(tmp_path):
    src = scenario_path("constant").read_text()
    p = tmp_path / "loose.cfg"
    p.write_text(src + "tolerances.lcp_tol = 1e-6\n")
    from parobs.grid import SpaceTimeGrid
    from parobs.solver import solve_psor
    from parobs.cli import _solver_kwargs, _PSOR_TOL_KEYS

    sc = load_scenario(p)
    kwargs = _solver_kwargs(sc, _PSOR_TOL_KEYS)
    assert kwargs == {"lcp_tol": 1e-6}
    grid = SpaceTimeGrid.build(sc.spec, 20, 10)
    sol = solve_psor(sc.spec, grid, **kwargs)
    assert sol.diagnostics["lcp_tol"] == 1e-6
