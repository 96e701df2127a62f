"""Cross-checks between the deterministic and stochastic halves.

Every check produces a ``CheckReport`` whose budget splits into a named bias
part (discretization / regression, calibrated per scenario and frozen in the
scenario file) and a statistical part (3 confidence intervals).  Checks are
pure: identical inputs give identical reports.

Multi-part checks are normalized: ``discrepancy`` is the worst measured-over-
allowed ratio and the budget is 1, so pass <=> discrepancy <= budget always
holds; the raw per-part numbers live in ``details``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded

from .grid import (
    SpaceTimeGrid,
    interp_space_time,
    reflecting_step_matrix,
    solve_density,
    transition_kernel,
)
from .problem import ObstacleProblemSpec, Weight
from .solver import (
    ObstacleSolution,
    central_gradient,
    obstacle_field,
    solve_penalized,
    solve_psor,
    _sigma_row,
)
from .stochastic import (
    PathEnsemble,
    _kernel_apply,
    rbsde_chain_dp,
    rbsde_reflected_mc,
    simulate_paths,
)

__all__ = [
    "CheckReport",
    "check_representation_u",
    "check_representation_z",
    "check_measure_identity",
    "check_interval_measure",
    "check_skorokhod",
    "check_ac_measure",
    "check_weighted_bounds",
    "check_minimality",
]

_TINY = 1e-12


def _banded_transpose(ab: np.ndarray) -> np.ndarray:
    """Transpose a (1, 1)-banded matrix in solve_banded storage."""
    out = np.zeros_like(ab)
    out[1] = ab[1]
    out[0, 1:] = ab[2, :-1]
    out[2, :-1] = ab[0, 1:]
    return out


@dataclass
class CheckReport:
    name: str
    discrepancy: float
    budget: float
    bias_part: float
    stat_part: float
    passed: bool
    provenance: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)


def _report(name, discrepancy, budget, bias, stat, provenance, details):
    return CheckReport(name=name, discrepancy=float(discrepancy), budget=float(budget),
                       bias_part=float(bias), stat_part=float(stat),
                       passed=bool(discrepancy <= budget), provenance=provenance or {},
                       details=details)


def _snap_indices(grid: SpaceTimeGrid, s: float, x: float):
    s_idx = int(np.clip(round(s / grid.dt), 0, grid.nt - 1))
    x_idx = int(np.clip(round((x - grid.x_nodes[0]) / grid.dx), 1, grid.nx))
    return s_idx, x_idx


def _mass_vector_evolution(spec, grid, start_index, rho=None):
    """Evolve the start measure dx (optionally rho-weighted) forward, slice by slice.

    Yields (k, w_k) with w_k[i] = sum_j dx rho_j P(X_{t_k} = x_i | X_{t_s} = x_j)
    for interior starts j, for k = start_index .. nt.
    """
    w = np.zeros(grid.nx + 2)
    w[1:-1] = grid.dx if rho is None else grid.dx * rho[1:-1]
    yield start_index, w
    for k in range(start_index, grid.nt):
        kern = transition_kernel(spec, grid, k, scheme="implicit")
        w = kern.apply_T(w)
        yield k + 1, w


# ---------------------------------------------------------------------------

def check_representation_u(spec: ObstacleProblemSpec, grid: SpaceTimeGrid, probes,
                           mc_params: dict, sol: ObstacleSolution | None = None,
                           bias_constant: float = 1.0, chain_budget: float = 1e-3,
                           provenance: dict | None = None) -> CheckReport:
    """Feynman-Kac check: grid solution against reflected-mc and chain-dp values.

    Per probe, the Monte Carlo budget is 3 CI + bias_constant (dt + dx^2); the
    chain comparison must sit within ``chain_budget``.
    """
    if sol is None:
        sol = solve_psor(spec, grid)
    chain = rbsde_chain_dp(spec, grid, 0, 1)
    paths = int(mc_params.get("paths", 10_000))
    dt_path = float(mc_params.get("dt_path", grid.dt))
    seed = int(mc_params.get("seed", 0))
    degree = int(mc_params.get("basis_degree", 3))

    rows = []
    worst = 0.0
    worst_bias = worst_stat = 0.0
    for j, (s, x) in enumerate(probes):
        s_idx, x_idx = _snap_indices(grid, s, x)
        s_snap, x_snap = float(grid.t_nodes[s_idx]), float(grid.x_nodes[x_idx])
        u_val = float(sol.u_values[s_idx, x_idx])
        ens = simulate_paths(spec, s_snap, x_snap, dt_path, paths, seed + j)
        mc = rbsde_reflected_mc(spec, ens, degree)
        bias = bias_constant * (grid.dt + grid.dx**2)
        stat = 3.0 * mc.ci
        mc_budget = stat + bias
        mc_disc = abs(u_val - mc.Y0)
        chain_disc = abs(u_val - chain.Y[s_idx, x_idx])
        ratio = max(mc_disc / max(mc_budget, _TINY), chain_disc / chain_budget)
        if ratio >= worst:
            worst, worst_bias, worst_stat = ratio, bias, stat
        rows.append({"s": s_snap, "x": x_snap, "u": u_val, "mc_Y0": mc.Y0, "mc_ci": mc.ci,
                     "chain_Y0": float(chain.Y[s_idx, x_idx]), "mc_disc": mc_disc,
                     "mc_budget": mc_budget, "chain_disc": chain_disc})
    return _report("representation-u", worst, 1.0, worst_bias, worst_stat, provenance,
                   {"probes": rows, "chain_budget": chain_budget})


def check_representation_z(spec: ObstacleProblemSpec, grid: SpaceTimeGrid,
                           ensemble: PathEnsemble, sol: ObstacleSolution | None = None,
                           basis_degree: int = 3, z_budget: float = 0.1,
                           provenance: dict | None = None) -> CheckReport:
    """Time-integrated RMS distance between sigma Du along paths and the MC Z."""
    if sol is None:
        sol = solve_psor(spec, grid)
    z_field = np.empty_like(sol.u_values)
    for k, t in enumerate(grid.t_nodes):
        sig = _sigma_row(spec, float(t), grid.x_nodes)
        z_field[k] = sig * central_gradient(sol.u_values[k], grid.dx)
    mc = rbsde_reflected_mc(spec, ensemble, basis_degree)
    acc = 0.0
    for k in range(ensemble.n_steps):
        zpde = interp_space_time(grid, z_field, float(ensemble.t_nodes[k]), ensemble.X[k])
        acc += float(np.mean((zpde - mc.Z[k]) ** 2)) * ensemble.dt_path
    value = float(np.sqrt(acc))
    return _report("representation-z", value, z_budget, z_budget, 0.0, provenance,
                   {"mse_time_integral": acc, "paths": ensemble.path_count})


def default_test_functions(spec: ObstacleProblemSpec):
    T = spec.T
    return [
        ("one", lambda t, x: np.ones_like(np.asarray(x, dtype=float))),
        ("cos-x", lambda t, x: np.cos(np.asarray(x, dtype=float))),
        ("time-bump", lambda t, x: np.exp(-((t - 0.5 * T) / (0.25 * T)) ** 2)
                                   * np.ones_like(np.asarray(x, dtype=float))),
    ]


def check_measure_identity(spec: ObstacleProblemSpec, grid: SpaceTimeGrid, s: float, x: float,
                           test_functions=None, sol: ObstacleSolution | None = None,
                           mc_params: dict | None = None, rel_budget: float = 5e-2,
                           method: str = "chain-dp",
                           provenance: dict | None = None) -> CheckReport:
    """E int xi dK against the p-weighted cell sums of the measure density.

    The left side uses the exact chain-dp increments weighted by the discrete
    density (default) or reflected-mc K along simulated paths.  The MC route
    is only quantitative when the regression basis spans the value function:
    its per-date increments (h - C)^+ inherit the full basis misfit, which
    swamps increments of size r dt on kinked payoffs.
    """
    if sol is None:
        sol = solve_psor(spec, grid)
    if test_functions is None:
        test_functions = default_test_functions(spec)
    mc_params = mc_params or {}
    s_idx, x_idx = _snap_indices(grid, s, x)
    dens = solve_density(spec, grid, s_idx, x_idx)

    # right side: sum of xi p r over cells, one pass per test function
    rights = {name: 0.0 for name, _ in test_functions}
    for rel_k, k in enumerate(range(s_idx, grid.nt)):
        t = float(grid.t_nodes[k])
        pm = dens.values[rel_k]
        row = pm * sol.r_values[k] * grid.dt
        for name, xi in test_functions:
            rights[name] += float(np.sum(np.asarray(xi(t, grid.x_nodes), dtype=float) * row))

    lefts = {name: 0.0 for name, _ in test_functions}
    stat = 0.0
    if method == "chain-dp":
        chain = rbsde_chain_dp(spec, grid, s_idx, x_idx)
        for rel_k, k in enumerate(range(s_idx, grid.nt)):
            t = float(grid.t_nodes[k])
            row = dens.values[rel_k] * chain.dK[rel_k]
            for name, xi in test_functions:
                lefts[name] += float(np.sum(np.asarray(xi(t, grid.x_nodes), dtype=float) * row))
    elif method == "reflected-mc":
        paths = int(mc_params.get("paths", 10_000))
        dt_path = float(mc_params.get("dt_path", grid.dt))
        seed = int(mc_params.get("seed", 0))
        degree = int(mc_params.get("basis_degree", 3))
        ens = simulate_paths(spec, float(grid.t_nodes[s_idx]), float(grid.x_nodes[x_idx]),
                             dt_path, paths, seed)
        mc = rbsde_reflected_mc(spec, ens, degree)
        per_path = {name: np.zeros(paths) for name, _ in test_functions}
        for k in range(ens.n_steps):
            t = float(ens.t_nodes[k])
            for name, xi in test_functions:
                per_path[name] += np.asarray(xi(t, ens.X[k]), dtype=float) * mc.dK[k]
        for name, _ in test_functions:
            lefts[name] = float(per_path[name].mean())
            stat = max(stat, 1.96 * float(per_path[name].std(ddof=1)) / np.sqrt(paths))
    else:
        raise ValueError(f"unknown method {method!r}")

    rows = {}
    worst = 0.0
    for name, _ in test_functions:
        l, r = lefts[name], rights[name]
        scale = max(abs(l), abs(r))
        rel = 0.0 if scale < _TINY else abs(l - r) / scale
        rows[name] = {"left": l, "right": r, "rel": rel}
        worst = max(worst, rel / rel_budget)
    return _report("measure-identity", worst, 1.0, rel_budget, stat, provenance, rows)


def check_interval_measure(spec: ObstacleProblemSpec, grid: SpaceTimeGrid, t1: float, t2: float,
                           F: tuple[float, float], sol: ObstacleSolution | None = None,
                           rel_budget: float = 5e-2,
                           provenance: dict | None = None) -> CheckReport:
    """mu([t1, t2] x F) from cell sums against the chain expectation from every
    grid start integrated over the truncation."""
    if sol is None:
        sol = solve_psor(spec, grid)
    k1 = int(np.ceil(t1 / grid.dt - 1e-12))
    k2 = int(np.floor(t2 / grid.dt + 1e-12))  # steps with t1 <= t_k < t2
    f_mask = (grid.x_nodes >= F[0] - 1e-12) & (grid.x_nodes <= F[1] + 1e-12)
    f_mask[0] = f_mask[-1] = False

    left = 0.0
    for k in range(max(k1, 0), min(k2, grid.nt)):
        left += float(np.sum(sol.r_values[k, f_mask])) * grid.dx * grid.dt

    right = 0.0
    if k2 > k1 and k1 < grid.nt:
        chain = rbsde_chain_dp(spec, grid, k1, 1)
        # evolve the dx start measure with the mass-conserving reflecting
        # kernel: the continuum identity integrates starts over all of R, so
        # flux through the truncation must cancel rather than absorb
        w = np.zeros(grid.nx + 2)
        w[1:-1] = grid.dx
        for k in range(k1, min(k2, grid.nt)):
            right += float(np.sum(w[f_mask] * chain.dK[k - k1, f_mask]))
            ab = reflecting_step_matrix(spec, grid, k)
            w = solve_banded((1, 1), _banded_transpose(ab), w)

    scale = max(abs(left), abs(right))
    rel = 0.0 if scale < _TINY else abs(left - right) / scale
    return _report("interval-measure", rel / rel_budget, 1.0, rel_budget, 0.0, provenance,
                   {"left": left, "right": right, "t1": t1, "t2": t2, "F": list(F)})


def check_skorokhod(sol: ObstacleSolution, n_penalty: int | None = None,
                    psor_budget: float = 1e-8, penalty_constant: float = 10.0,
                    provenance: dict | None = None) -> CheckReport:
    """Normalized flat-off-contact functional sum (u - h) r / sum r.

    Exactly zero off contact for PSOR by construction; of size C / n for a
    penalized solution at level n.
    """
    h_field = sol.diagnostics.get("h_field")
    if h_field is None:
        raise ValueError("solution lacks the obstacle field needed for the Skorokhod check")
    num = float(np.sum((sol.u_values - h_field) * sol.r_values))
    den = float(np.sum(sol.r_values))
    value = 0.0 if den < _TINY else abs(num) / den
    budget = psor_budget if n_penalty is None else penalty_constant / float(n_penalty)
    return _report("skorokhod", value, budget, budget, 0.0, provenance,
                   {"numerator": num, "normalizer": den, "n_penalty": n_penalty})


def check_ac_measure(spec: ObstacleProblemSpec, grid: SpaceTimeGrid, ensemble: PathEnsemble,
                     sol: ObstacleSolution | None = None, basis_degree: int = 3,
                     residual_budget: float = 5e-2, k_bias_constant: float = 2.0,
                     provenance: dict | None = None) -> CheckReport:
    """Absolute-continuity check: K~ = int r(t, X_t) dt built from the grid
    density must make (u, sigma Du, K~) satisfy the backward equation along
    paths, and its terminal mean must match the chain K expectation.

    The reflected-mc terminal K is reported alongside for reference: its
    per-date increments (h - C)^+ collect the positive part of the regression
    error, a bias whose ratio to the CI does not shrink with the sample size,
    so the exact chain expectation is the sound comparison target.
    """
    if sol is None:
        sol = solve_psor(spec, grid)
    z_field = np.empty_like(sol.u_values)
    for k, t in enumerate(grid.t_nodes):
        z_field[k] = _sigma_row(spec, float(t), grid.x_nodes) * central_gradient(sol.u_values[k], grid.dx)

    n, m = ensemble.n_steps, ensemble.path_count
    dt = ensemble.dt_path
    total = np.zeros(m)
    k_tilde = np.zeros(m)
    u_start = interp_space_time(grid, sol.u_values, float(ensemble.t_nodes[0]), ensemble.X[0])
    for k in range(n):
        t = float(ensemble.t_nodes[k])
        xk = ensemble.X[k]
        u_itp = interp_space_time(grid, sol.u_values, t, xk)
        z_itp = interp_space_time(grid, z_field, t, xk)
        r_itp = interp_space_time(grid, sol.r_values, t, xk)
        fval = np.asarray(spec.driver.f(t, xk, u_itp, z_itp), dtype=float)
        total += fval * dt + r_itp * dt - z_itp * ensemble.dW[k]
        k_tilde += r_itp * dt
    phi_T = np.asarray(spec.obstacle.phi(ensemble.X[n]), dtype=float)
    residual = phi_T + total - u_start
    res_rms = float(np.sqrt(np.mean(residual**2)))

    # exact chain expectation of K_T from the snapped ensemble start
    s_idx, x_idx = _snap_indices(grid, float(ensemble.t_nodes[0]), ensemble.x_start)
    chain = rbsde_chain_dp(spec, grid, s_idx, x_idx)
    law = np.zeros(grid.nx + 2)
    law[x_idx] = 1.0
    k_chain = 0.0
    for k in range(s_idx, grid.nt):
        k_chain += float(np.sum(law * chain.dK[k - s_idx]))
        law = transition_kernel(spec, grid, k, scheme="implicit").apply_T(law)

    mean_gap = abs(float(k_tilde.mean()) - k_chain)
    stat = 3.0 * 1.96 * float(k_tilde.std(ddof=1)) / np.sqrt(m)
    k_budget = stat + k_bias_constant * (grid.dt + grid.dx**2)
    worst = max(res_rms / residual_budget, mean_gap / max(k_budget, _TINY))

    mc = rbsde_reflected_mc(spec, ensemble, basis_degree)
    k_mc_mean = float(mc.K_cumulative()[-1].mean())
    return _report("ac-measure", worst, 1.0, residual_budget, stat, provenance,
                   {"bsde_residual_rms": res_rms, "k_mean_gap": mean_gap,
                    "k_tilde_mean": float(k_tilde.mean()), "k_chain_mean": k_chain,
                    "k_mc_mean_reference": k_mc_mean, "k_budget": k_budget})


def check_weighted_bounds(spec: ObstacleProblemSpec, grid: SpaceTimeGrid,
                          weight: Weight | None = None, phis=None, g=None,
                          bounds: tuple[float, float] = (0.2, 5.0),
                          provenance: dict | None = None) -> CheckReport:
    """Two-sided weighted-norm equivalence ratios for terminal and running data.

    R(phi) compares the rho-weighted mass of E |phi(X_T)| against that of phi;
    the check also reports the max pointwise kernel-bound ratio
    E |phi(X_T)|^2 rho^2(x) sqrt(T - s) / |phi|^2_{2, rho}.
    """
    weight = weight or spec.weight
    rho = weight.rho(grid.x_nodes)
    if phis is None:
        phis = [
            ("one", lambda x: np.ones_like(x)),
            ("gauss-bump", lambda x: np.exp(-0.5 * x**2)),
            ("tilted", lambda x: 1.0 / (1.0 + x**2)),
        ]
    if g is None:
        g = lambda t, x: np.ones_like(x)

    evo = list(_mass_vector_evolution(spec, grid, 0, rho=rho))
    w_final = evo[-1][1]

    rows = {}
    worst = 0.0
    lo, hi = bounds
    for name, phi_fn in phis:
        vals = np.abs(np.asarray(phi_fn(grid.x_nodes), dtype=float))
        num = float(np.sum(vals * w_final))
        den = float(np.sum(vals[1:-1] * rho[1:-1]) * grid.dx)
        R = num / den if den > 0 else float("inf")
        rows[name] = R
        worst = max(worst, R / hi, lo / R if R > 0 else float("inf"))

    g_num = g_den = 0.0
    for k, w in evo:
        t = float(grid.t_nodes[k])
        gv = np.abs(np.asarray(g(t, grid.x_nodes), dtype=float))
        g_num += float(np.sum(gv * w)) * grid.dt
        g_den += float(np.sum(gv[1:-1] * rho[1:-1]) * grid.dx) * grid.dt
    R_g = g_num / g_den if g_den > 0 else float("inf")
    worst = max(worst, R_g / hi, lo / R_g if R_g > 0 else float("inf"))

    # pointwise kernel-bound shape for the bump probe, by one backward pass
    bump = np.exp(-0.5 * grid.x_nodes**2)
    norm_sq = float(np.sum((bump[1:-1] * rho[1:-1]) ** 2) * grid.dx)
    v = bump**2
    max_shape = 0.0
    for k in range(grid.nt - 1, -1, -1):
        v = _kernel_apply(spec, grid, k, v, "implicit")
        t_gap = spec.T - float(grid.t_nodes[k])
        if t_gap >= 0.25 * spec.T:
            ratio = float(np.max(v[1:-1] * rho[1:-1] ** 2)) * np.sqrt(t_gap) / norm_sq
            max_shape = max(max_shape, ratio)

    details = {"R": rows, "R_g": R_g, "kernel_bound_max_ratio": max_shape, "bounds": list(bounds)}
    return _report("weighted-bounds", worst, 1.0, hi, 0.0, provenance, details)


def check_minimality(spec: ObstacleProblemSpec, grid: SpaceTimeGrid, n_schedule,
                     sol_psor: ObstacleSolution | None = None, mono_tol: float = 1e-8,
                     gap_budget: float = 1e-3,
                     provenance: dict | None = None) -> CheckReport:
    """Penalized solutions approach the unique PSOR solution from below."""
    if sol_psor is None:
        sol_psor = solve_psor(spec, grid)
    overshoot = 0.0
    last = None
    for n in n_schedule:
        pen = solve_penalized(spec, grid, int(n))
        overshoot = max(overshoot, float(np.max(pen.u_values - sol_psor.u_values)))
        last = pen
    gap = float(np.max(np.abs(last.u_values - sol_psor.u_values)))
    worst = max(overshoot / mono_tol, gap / gap_budget)
    return _report("minimality", worst, 1.0, gap_budget, 0.0, provenance,
                   {"overshoot": overshoot, "final_gap": gap,
                    "n_final": int(n_schedule[-1])})
