import numpy as np
import pytest

from parobs.errors import MissingDerivative, RegressionSingular
from parobs.grid import SpaceTimeGrid, solve_density
from parobs.problem import Coefficients, Driver, ObstacleData, ObstacleProblemSpec, Weight
from parobs.scenarios import build_family
from parobs.solver import solve_psor, solve_unconstrained
from parobs.stochastic import (
    estimate_g_integral,
    moment_ratio_probe,
    optimal_stopping_value,
    penalization_convergence_mc,
    rbsde_chain_dp,
    rbsde_penalized_mc,
    rbsde_reflected_mc,
    simulate_paths,
    snell_envelope_value,
    solution_reward_field,
)

from oracles import binomial_american_put


def _const_family(a0=1.0, value=1.0, T=1.0):
    return build_family("constant", {
        "problem.T": T, "problem.x_lo": -8.0, "problem.x_hi": 8.0,
        "problem.alpha": 1.0, "problem.value": value, "problem.a0": a0,
    })


# ---------------------------------------------------------------------------
# path simulation

def test_paths_reproducible_and_prefix_stable():
    spec = _const_family()
    e1 = simulate_paths(spec, 0.0, 0.3, 0.05, 1000, seed=42)
    e2 = simulate_paths(spec, 0.0, 0.3, 0.05, 1000, seed=42)
    assert np.array_equal(e1.X, e2.X) and np.array_equal(e1.dW, e2.dW)
    bigger = simulate_paths(spec, 0.0, 0.3, 0.05, 1500, seed=42)
    assert np.array_equal(bigger.X[:, :1000], e1.X)
    other = simulate_paths(spec, 0.0, 0.3, 0.05, 1000, seed=43)
    assert not np.array_equal(other.X, e1.X)


def test_brownian_variance_and_increment_mean():
    spec = _const_family()
    ens = simulate_paths(spec, 0.0, 0.0, 0.01, 40_000, seed=7)
    assert np.all(ens.X[0] == 0.0)
    var = ens.X[-1].var()
    ci = 3.0 * np.sqrt(2.0 / ens.path_count)  # var of chi2 estimate ~ 2 T^2 / M
    assert abs(var - 1.0) <= ci
    means = np.abs(ens.dW.mean(axis=1))
    assert np.max(means) <= 4.0 * np.sqrt(ens.dt_path / ens.path_count)


def test_scaled_diffusion_variance():
    spec = _const_family(a0=4.0)
    ens = simulate_paths(spec, 0.0, 1.0, 0.01, 40_000, seed=11, store_dw=False)
    assert abs(ens.X[-1].var() - 4.0) <= 4.0 * 3.0 * np.sqrt(2.0 / ens.path_count)


def test_missing_derivative_raises():
    base = _const_family()
    spec = ObstacleProblemSpec(
        coefficients=Coefficients(a=base.coefficients.a, a_x=None, lambda_ell=1.0, Lambda_ell=1.0),
        driver=base.driver, obstacle=base.obstacle, T=1.0, weight=Weight(1.0),
        x_lo=-8.0, x_hi=8.0)
    with pytest.raises(MissingDerivative):
        simulate_paths(spec, 0.0, 0.0, 0.1, 10, seed=0)


def test_sine_law_matches_grid_density(sine_scenario):
    spec = sine_scenario.spec
    grid = SpaceTimeGrid.build(spec, 200, 200)
    center = int(round((0.0 - grid.x_nodes[0]) / grid.dx))
    dens = solve_density(spec, grid, 0, center)
    ens = simulate_paths(spec, 0.0, float(grid.x_nodes[center]), spec.T / 200, 100_000,
                         seed=5, store_dw=False)
    # histogram on blocks of 4 cells to keep per-bin noise below the budget
    stride = 4
    edges = grid.x_nodes[::stride]
    hist, _ = np.histogram(ens.X[-1], bins=edges)
    emp = hist / ens.path_count
    pde = np.add.reduceat(dens.values[-1][:len(edges) - 1 + (len(grid.x_nodes) - len(edges))],
                          np.arange(0, (len(edges) - 1) * stride, stride))[:len(edges) - 1]
    assert float(np.sum(np.abs(emp - pde))) <= 5e-2


# ---------------------------------------------------------------------------
# probes

def test_moment_probe_requires_p_at_least_four():
    spec = _const_family()
    ens = simulate_paths(spec, 0.0, 0.0, 0.1, 100, seed=1, store_dw=False)
    with pytest.raises(ValueError):
        moment_ratio_probe(ens, 2.0)


def test_moment_probe_degenerate_diffusion_ratio_one():
    spec = _const_family(a0=1e-12)
    ens = simulate_paths(spec, 0.0, 5.0, 0.05, 2000, seed=3, store_dw=False)
    mr = moment_ratio_probe(ens, 4.0)
    assert mr.ratio == pytest.approx(1.0, abs=1e-4)


def test_moment_probe_brownian_range():
    spec = _const_family()
    ens = simulate_paths(spec, 0.0, 0.0, 0.02, 200_000, seed=9, store_dw=False)
    mr = moment_ratio_probe(ens, 4.0)
    assert 1.0 <= mr.ratio <= 3.5
    assert mr.ci > 0


def test_g_integral_exact_for_constant():
    spec = _const_family()
    ens = simulate_paths(spec, 0.0, 0.0, 0.05, 500, seed=2, store_dw=False)
    gi = estimate_g_integral(ens, lambda t, x: np.ones_like(np.asarray(x, float)))
    assert gi.value == pytest.approx(1.0, abs=1e-12)
    assert gi.ci == 0.0


def test_g_integral_linear_probe():
    spec = _const_family()
    ens = simulate_paths(spec, 0.0, 0.0, 0.01, 50_000, seed=4, store_dw=False)
    gi = estimate_g_integral(ens, lambda t, x: np.asarray(x, float))
    assert abs(gi.value - 0.5) <= 3.0 * gi.ci + 0.01  # int_0^1 t dt = 1/2


def test_g_integral_truncation_indicator_small(heat_scenario):
    spec = heat_scenario.spec
    ens = simulate_paths(spec, 0.0, 0.0, 0.02, 20_000, seed=12, store_dw=False)
    gi = estimate_g_integral(ens, lambda t, x: (np.abs(np.asarray(x, float)) > 7.0).astype(float))
    assert gi.value <= 1e-4


# ---------------------------------------------------------------------------
# chain dp

def test_chain_dp_constant(constant_scenario):
    spec = constant_scenario.spec
    grid = SpaceTimeGrid.build(spec, 40, 30)
    est = rbsde_chain_dp(spec, grid, 0, 20)
    assert est.Y0 == pytest.approx(1.0, abs=1e-13)
    assert np.max(np.abs(est.Z)) <= 1e-12
    assert np.max(est.dK) == 0.0
    assert est.obstacle_slack == 0.0


def test_chain_dp_inactive_equals_plain_solver(heat_scenario):
    spec = heat_scenario.spec
    grid = SpaceTimeGrid.build(spec, 80, 60)
    est = rbsde_chain_dp(spec, grid, 0, 1)
    free = solve_unconstrained(spec, grid)
    assert np.max(np.abs(est.Y - free)) <= 1e-10
    assert np.max(est.dK) == 0.0


def test_chain_dp_put_against_binomial(put_scenario):
    spec = put_scenario.spec
    grid = SpaceTimeGrid.build(spec, 200, 200)
    ix = int(round((0.0 - grid.x_nodes[0]) / grid.dx))
    est = rbsde_chain_dp(spec, grid, 0, ix)
    crr = binomial_american_put(float(np.exp(grid.x_nodes[ix])), 1.0, 0.06, 0.3, 0.5, 2000)
    assert abs(est.Y0 - crr) <= 5e-3
    assert np.min(est.dK) >= 0.0


def test_chain_dp_monotone_in_obstacle(put_scenario):
    spec = put_scenario.spec
    grid = SpaceTimeGrid.build(spec, 60, 40)
    base = rbsde_chain_dp(spec, grid, 0, 30).Y0
    raised_obstacle = ObstacleData(
        h=lambda t, x: np.asarray(spec.obstacle.h(t, x), float) + 0.1,
        phi=lambda x: np.asarray(spec.obstacle.phi(x), float) + 0.1,
        h_growth=spec.obstacle.h_growth)
    spec2 = ObstacleProblemSpec(coefficients=spec.coefficients, driver=spec.driver,
                                obstacle=raised_obstacle, T=spec.T, weight=spec.weight,
                                x_lo=spec.x_lo, x_hi=spec.x_hi)
    assert rbsde_chain_dp(spec2, grid, 0, 30).Y0 >= base - 1e-12


# ---------------------------------------------------------------------------
# regression schemes

def test_mc_schemes_exact_on_constant(constant_scenario):
    spec = constant_scenario.spec
    ens = simulate_paths(spec, 0.0, 0.0, 0.05, 4000, seed=21)
    for est in (rbsde_reflected_mc(spec, ens, 2),
                rbsde_penalized_mc(spec, ens, 64, 2)):
        assert est.Y0 == pytest.approx(1.0, abs=1e-12)
        assert np.max(np.abs(est.dK)) <= 1e-12
        assert np.max(np.abs(est.Z)) <= 1e-12
        assert est.obstacle_slack <= 1e-12


def test_penalized_mc_inactive_collapses_to_terminal_mean(heat_scenario):
    spec = heat_scenario.spec
    ens = simulate_paths(spec, 0.0, 0.0, 0.05, 4000, seed=22)
    est = rbsde_penalized_mc(spec, ens, 256, 3)
    assert est.Y0 == pytest.approx(float(np.mean(spec.obstacle.phi(ens.X[-1]))), abs=1e-12)
    assert np.max(est.dK) == 0.0


def test_reflected_mc_contact_everywhere(quad_scenario):
    spec = quad_scenario.spec
    ens = simulate_paths(spec, 0.0, 0.0, spec.T / 100, 20_000, seed=23)
    est = rbsde_reflected_mc(spec, ens, 3)
    h_vals = np.array([spec.obstacle.h(float(t), ens.X[k])
                       for k, t in enumerate(ens.t_nodes)])
    # Y sticks to the obstacle except for fit extrapolation at extreme paths
    assert np.mean(np.abs(est.Y - h_vals)) <= 5e-3
    assert np.quantile(np.abs(est.Y - h_vals), 0.99) <= 2e-2
    k_total = est.K_cumulative()[-1].mean()
    assert k_total == pytest.approx(spec.T, rel=5e-2)  # r = 1 so K_T = T


def test_k_monotone_and_zero_at_start(put_scenario):
    spec = put_scenario.spec
    ens = simulate_paths(spec, 0.0, -0.2, spec.T / 100, 5000, seed=24)
    for est in (rbsde_reflected_mc(spec, ens, 3), rbsde_penalized_mc(spec, ens, 256, 3)):
        K = est.K_cumulative()
        assert np.all(K[0] == 0.0)
        assert np.min(np.diff(K, axis=0)) >= 0.0
    chain = rbsde_chain_dp(spec, SpaceTimeGrid.build(spec, 60, 40), 0, 20)
    assert np.min(chain.dK) >= 0.0


def test_discrete_skorokhod_flat_off_contact(put_scenario):
    spec = put_scenario.spec
    ens = simulate_paths(spec, 0.0, -0.2, spec.T / 100, 5000, seed=25)
    est = rbsde_reflected_mc(spec, ens, 3)
    for k in range(ens.n_steps):
        h_k = np.asarray(spec.obstacle.h(float(ens.t_nodes[k]), ens.X[k]), float)
        gap = (est.Y[k] - h_k) * est.dK[k]
        assert np.max(np.abs(gap)) <= 1e-12  # dK > 0 only where Y = h exactly


def test_regression_singular_for_degenerate_cloud():
    spec = _const_family(a0=1e-30)
    ens = simulate_paths(spec, 0.0, 1.0, 0.1, 1024, seed=26)
    with pytest.raises(RegressionSingular):
        rbsde_reflected_mc(spec, ens, 3)


def test_basis_degree_capped_and_path_floor():
    spec = _const_family()
    ens = simulate_paths(spec, 0.0, 0.0, 0.1, 1200, seed=27)
    with pytest.raises(ValueError):
        rbsde_reflected_mc(spec, ens, 7)
    small = simulate_paths(spec, 0.0, 0.0, 0.1, 200, seed=27)
    with pytest.raises(ValueError):
        rbsde_reflected_mc(spec, small, 3)


def test_convergence_table_zero_on_constant(constant_scenario):
    spec = constant_scenario.spec
    ens = simulate_paths(spec, 0.0, 0.0, 0.1, 2000, seed=28)
    tab = penalization_convergence_mc(spec, ens, [4, 16, 64], 2)
    assert np.max(tab.y_distance) <= 1e-12
    assert np.max(tab.k_distance) <= 1e-12


def test_convergence_table_inactive_within_noise(heat_scenario):
    spec = heat_scenario.spec
    ens = simulate_paths(spec, 0.0, 0.0, 0.05, 4000, seed=29)
    tab = penalization_convergence_mc(spec, ens, [16, 256], 3)
    assert np.max(tab.y_distance) <= 1e-10
    assert np.max(tab.k_distance) <= 1e-10


# ---------------------------------------------------------------------------
# optimal stopping

def test_stopping_constant_scenario(constant_scenario):
    spec = constant_scenario.spec
    grid = SpaceTimeGrid.build(spec, 40, 30)
    sol = solve_psor(spec, grid)
    ens = simulate_paths(spec, 0.0, 0.0, spec.T / 30, 2000, seed=30)
    sv = optimal_stopping_value(spec, grid, sol, ens, 0.0, 0.0)
    assert sv.rule_value == pytest.approx(1.0, abs=1e-12)
    assert sv.snell_value == pytest.approx(1.0, abs=1e-12)
    assert sv.gap <= 1e-12


def test_stopping_inactive_obstacle_never_stops(heat_scenario):
    spec = heat_scenario.spec
    grid = SpaceTimeGrid.build(spec, 100, 80)
    sol = solve_psor(spec, grid)
    ens = simulate_paths(spec, 0.0, 0.0, spec.T / 80, 20_000, seed=31)
    sv = optimal_stopping_value(spec, grid, sol, ens, 0.0, 0.0)
    # rule never triggers: value = E phi(X_T), the plain solution
    ix = int(round((0.0 - grid.x_nodes[0]) / grid.dx))
    assert abs(sv.rule_value - sol.u_values[0, ix]) <= 3.0 * sv.rule_ci + 5e-3
    assert sv.gap <= 3.0 * sv.rule_ci + 5e-3


def test_snell_equals_chain_dp_without_driver_dependence(quad_scenario):
    spec = quad_scenario.spec
    grid = SpaceTimeGrid.build(spec, 100, 80)
    sol = solve_psor(spec, grid)
    ix = 30
    chain = rbsde_chain_dp(spec, grid, 0, ix)
    snell = snell_envelope_value(spec, grid, solution_reward_field(spec, grid, sol), 0, ix)
    assert snell == chain.Y0  # bit-identical recursions when f ignores (y, z)


def test_chain_dp_skorokhod_exact(put_scenario):
    spec = put_scenario.spec
    grid = SpaceTimeGrid.build(spec, 80, 60)
    chain = rbsde_chain_dp(spec, grid, 0, 40)
    from parobs.solver import obstacle_field

    h_field = obstacle_field(spec, grid)
    assert np.max(np.abs((chain.Y - h_field) * chain.dK)) == 0.0


def test_estimates_deterministic_for_fixed_inputs(put_scenario):
    spec = put_scenario.spec
    e1 = simulate_paths(spec, 0.0, -0.1, spec.T / 50, 4000, seed=99)
    e2 = simulate_paths(spec, 0.0, -0.1, spec.T / 50, 4000, seed=99)
    a = rbsde_reflected_mc(spec, e1, 3)
    b = rbsde_reflected_mc(spec, e2, 3)
    assert a.Y0 == b.Y0 and a.ci == b.ci
    assert np.array_equal(a.Y, b.Y) and np.array_equal(a.dK, b.dK)
