"""Diffusion path simulation, reflected-BSDE schemes, and optimal stopping.

Three routes estimate the RBSDE triple (Y, Z, K):

* ``rbsde_chain_dp``: exact backward dynamic programming on the grid Markov
  chain -- the noise-free oracle.
* ``rbsde_penalized_mc``: least-squares Monte Carlo for the BSDE with the
  upward penalty n (y - h)^-.
* ``rbsde_reflected_mc``: discretely reflected least-squares Monte Carlo.

Paths are generated from counter-based Philox streams keyed by (seed, block);
the block layout is a fixed module constant, so ensembles are bit-identical
for fixed (seed, path_count, dt_path) regardless of how work is scheduled,
and the first paths of a larger ensemble coincide with a smaller one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from .errors import InnerDivergence, MissingDerivative, RegressionSingular
from .grid import SpaceTimeGrid, _banded_backward_matrix, assemble_operator, interp_space_time, transition_kernel
from .problem import ObstacleProblemSpec
from .solver import (
    ObstacleSolution,
    boundary_values,
    central_gradient,
    obstacle_field,
    terminal_field,
    _sigma_row,
)

__all__ = [
    "PathEnsemble",
    "RbsdeEstimate",
    "MomentRatio",
    "GIntegral",
    "ConvergenceTable",
    "StoppingValue",
    "simulate_paths",
    "moment_ratio_probe",
    "estimate_g_integral",
    "rbsde_chain_dp",
    "rbsde_penalized_mc",
    "rbsde_reflected_mc",
    "penalization_convergence_mc",
    "snell_envelope_value",
    "optimal_stopping_value",
]

BLOCK_SIZE = 8192  # fixed stream granularity; part of the reproducibility contract
N_BATCHES = 10


@dataclass
class PathEnsemble:
    s: float
    x_start: float
    dt_path: float
    path_count: int
    seed: int
    t_nodes: np.ndarray          # n_steps + 1 times from s to T
    X: np.ndarray                # (n_steps + 1, M)
    dW: np.ndarray | None        # (n_steps, M); None when not stored

    @property
    def n_steps(self) -> int:
        return len(self.t_nodes) - 1


def simulate_paths(spec: ObstacleProblemSpec, s: float, x: float, dt_path: float,
                   path_count: int, seed: int, store_dw: bool = True) -> PathEnsemble:
    """Euler-Maruyama paths of dX = (a_x / 2) dt + sqrt(a) dW started at (s, x).

    The drift a_x / 2 is the Ito form of the divergence-form generator for
    continuously differentiable coefficients; ``a_x`` must be supplied.
    """
    coef = spec.coefficients
    if coef.a_x is None:
        raise MissingDerivative("path simulation needs the coefficient derivative a_x")
    horizon = spec.T - s
    if dt_path <= 0 or dt_path > horizon + 1e-15:
        raise ValueError("need 0 < dt_path <= T - s")
    n_steps = int(round(horizon / dt_path))
    if abs(n_steps * dt_path - horizon) > 1e-9 * max(1.0, spec.T):
        raise ValueError("dt_path must divide T - s")
    t_nodes = s + dt_path * np.arange(n_steps + 1)

    X = np.empty((n_steps + 1, path_count))
    dW = np.empty((n_steps, path_count)) if store_dw else None
    sdt = np.sqrt(dt_path)
    done = 0
    block = 0
    while done < path_count:
        bs = min(BLOCK_SIZE, path_count - done)
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=[seed, block])))
        # always draw the full block so path i sees the same stream for any
        # path_count (prefix stability); the tail of the last block is unused
        z = rng.standard_normal((n_steps, BLOCK_SIZE))[:, :bs]
        cols = slice(done, done + bs)
        X[0, cols] = x
        xk = np.full(bs, float(x))
        for k in range(n_steps):
            t = float(t_nodes[k])
            drift = 0.5 * np.asarray(coef.a_x(t, xk), dtype=float)
            sig = np.sqrt(np.asarray(coef.a(t, xk), dtype=float))
            dw = sdt * z[k]
            xk = xk + drift * dt_path + sig * dw
            X[k + 1, cols] = xk
            if store_dw:
                dW[k, cols] = dw
        done += bs
        block += 1
    return PathEnsemble(s=s, x_start=float(x), dt_path=dt_path, path_count=path_count,
                        seed=seed, t_nodes=t_nodes, X=X, dW=dW)


@dataclass
class MomentRatio:
    p: float
    ratio: float
    ci: float
    sup_moment: float
    terminal_moment: float


def _batch_slices(m: int):
    edges = np.linspace(0, m, N_BATCHES + 1).astype(int)
    return [slice(a, b) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def moment_ratio_probe(ensemble: PathEnsemble, p_exponent: float = 4.0) -> MomentRatio:
    """Ratio of the p-th moment of the running sup to the terminal p-th moment.

    Defined for p >= 4 only (the range the estimate is proved for); the CI is
    1.96 times the spread of the ratio over ten contiguous path batches.
    """
    if p_exponent < 4:
        raise ValueError("p_exponent must be >= 4")
    sup = np.abs(ensemble.X[0]).copy()
    for k in range(1, ensemble.n_steps + 1):
        np.maximum(sup, np.abs(ensemble.X[k]), out=sup)
    sup_p = sup**p_exponent
    term_p = np.abs(ensemble.X[-1]) ** p_exponent
    num, den = float(sup_p.mean()), float(term_p.mean())
    ratios = []
    for sl in _batch_slices(ensemble.path_count):
        d = float(term_p[sl].mean())
        if d > 0:
            ratios.append(float(sup_p[sl].mean()) / d)
    ci = 1.96 * float(np.std(ratios, ddof=1)) / np.sqrt(len(ratios)) if len(ratios) > 1 else 0.0
    return MomentRatio(p=p_exponent, ratio=num / den, ci=ci, sup_moment=num, terminal_moment=den)


@dataclass
class GIntegral:
    value: float
    ci: float


def estimate_g_integral(ensemble: PathEnsemble, g) -> GIntegral:
    """Monte Carlo estimate of E integral_s^T |g(t, X_t)|^2 dt (trapezoid in t)."""
    n, m = ensemble.n_steps, ensemble.path_count
    acc = np.zeros(m)
    for k in range(n + 1):
        w = 0.5 if k in (0, n) else 1.0
        vals = np.asarray(g(float(ensemble.t_nodes[k]), ensemble.X[k]), dtype=float)
        acc += w * np.broadcast_to(vals, (m,)) ** 2
    acc *= ensemble.dt_path
    value = float(acc.mean())
    ci = 1.96 * float(acc.std(ddof=1)) / np.sqrt(m) if m > 1 else 0.0
    return GIntegral(value=value, ci=ci)


# ---------------------------------------------------------------------------
# RBSDE schemes

@dataclass
class RbsdeEstimate:
    scheme: str
    Y0: float
    ci: float
    t_nodes: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    dK: np.ndarray
    n_penalty: int | None = None
    basis_degree: int | None = None
    obstacle_slack: float = 0.0

    def K_cumulative(self) -> np.ndarray:
        """K with K(s) = 0; one more row than dK."""
        out = np.zeros((self.dK.shape[0] + 1,) + self.dK.shape[1:])
        np.cumsum(self.dK, axis=0, out=out[1:])
        return out


def _kernel_apply(spec, grid, t_index, vec, scheme):
    """Action of the one-step chain kernel P on a value vector."""
    op = assemble_operator(spec, grid, t_index)
    if scheme == "implicit":
        ab = _banded_backward_matrix(op, grid.dt, mode=spec.boundary_mode)
        return solve_banded((1, 1), ab, vec)
    kern = transition_kernel(spec, grid, t_index, scheme=scheme)
    return kern.apply(vec)


def rbsde_chain_dp(spec: ObstacleProblemSpec, grid: SpaceTimeGrid, s_index: int,
                   x_index: int, scheme: str = "implicit") -> RbsdeEstimate:
    """Exact reflected backward dynamic programming on the grid chain.

    Conditional expectations are exact kernel applications, so the estimate
    carries no regression noise and a zero confidence interval.
    """
    if not 0 <= s_index < grid.nt:
        raise ValueError("s_index out of range")
    if not 0 <= x_index <= grid.nx + 1:
        raise ValueError("x_index out of range")
    clamp = spec.boundary_mode == "clamp-to-data"
    h_field = obstacle_field(spec, grid)
    bnd = boundary_values(spec, grid, h_field) if clamp else None
    dt = grid.dt
    n_slices = grid.nt - s_index + 1

    Y = np.empty((n_slices, grid.nx + 2))
    Z = np.empty_like(Y)
    dK = np.zeros_like(Y)
    Y[-1] = terminal_field(spec, grid)
    Z[-1] = _sigma_row(spec, spec.T, grid.x_nodes) * central_gradient(Y[-1], grid.dx)

    for j in range(n_slices - 2, -1, -1):
        k = s_index + j
        t = float(grid.t_nodes[k])
        cont = _kernel_apply(spec, grid, k, Y[j + 1], scheme)
        sig = _sigma_row(spec, t, grid.x_nodes)
        z_proxy = sig * central_gradient(cont, grid.dx)
        y = cont.copy()
        for _ in range(100):
            c = cont + dt * np.asarray(spec.driver.f(t, grid.x_nodes, y, z_proxy), dtype=float)
            if np.max(np.abs(c - y)) <= 1e-13 * (1.0 + np.max(np.abs(c))):
                y = c
                break
            y = c
        else:
            raise InnerDivergence(f"chain-dp driver iteration stalled at step {k}")
        Y[j] = np.maximum(h_field[k], y)
        dK[j] = np.maximum(h_field[k] - y, 0.0)
        if clamp:
            Y[j, 0], Y[j, -1] = bnd[k]
            dK[j, 0] = dK[j, -1] = 0.0
        Z[j] = sig * central_gradient(Y[j], grid.dx)

    slack = float(np.max(np.maximum(h_field[s_index:] - Y, 0.0)))
    return RbsdeEstimate(scheme="chain-dp", Y0=float(Y[0, x_index]), ci=0.0,
                         t_nodes=grid.t_nodes[s_index:].copy(), Y=Y, Z=Z, dK=dK,
                         obstacle_slack=slack)


def _design_matrix(x: np.ndarray, degree: int) -> np.ndarray:
    m, s = float(x.mean()), float(x.std())
    if s > 1e-12 * (1.0 + abs(m)):
        x = (x - m) / s
    return np.vander(x, degree + 1, increasing=True)


def _regress(design: np.ndarray, target: np.ndarray) -> np.ndarray:
    coef, _, rank, _ = np.linalg.lstsq(design, target, rcond=None)
    if rank < design.shape[1]:
        raise RegressionSingular(
            f"design matrix rank {rank} < {design.shape[1]}; basis too rich for the sample")
    return coef


def _mc_backward(spec: ObstacleProblemSpec, ensemble: PathEnsemble, basis_degree: int,
                 kind: str, n_penalty: float = 0.0):
    """Shared LSMC backward loop for the reflected and penalized schemes.

    The regression target is the realized per-path value V, not the fitted
    field: exercising (or penalizing against) the realized rollforward keeps
    the well-known upward bias of fitted-value iteration from compounding
    over many reflection dates.  The estimator fields Y, Z, dK are the fitted
    quantities; at the start slice all paths coincide, so the regression
    degenerates to the plain mean there.
    """
    if ensemble.dW is None:
        raise ValueError("ensemble must store Brownian increments for regression schemes")
    if basis_degree > 6:
        raise ValueError("basis degree is capped at 6")
    if ensemble.path_count < 1000:
        raise ValueError("regression schemes need at least 1000 paths")
    n, m = ensemble.n_steps, ensemble.path_count
    dt = ensemble.dt_path
    obs = spec.obstacle
    f = spec.driver.f
    nq = float(n_penalty)

    def resolve(t, xk, cont, zk, h_k):
        """Per-path implicit value update; returns (fitted y, pre-reflection c)."""
        y = cont
        c = cont
        for _ in range(100):
            c = cont + dt * np.asarray(f(t, xk, y, zk), dtype=float)
            if kind == "reflected":
                y_new = np.maximum(h_k, c)
            else:
                # exact scalar solve of y = c + dt n (y - h)^-: the penalty is
                # damped by 1 / (1 + dt n), so the update is stable for all n
                y_new = np.maximum(c, (c + dt * nq * h_k) / (1.0 + dt * nq))
            if np.max(np.abs(y_new - y)) <= 1e-13 * (1.0 + np.max(np.abs(y_new))):
                return y_new, c
            y = y_new
        raise InnerDivergence(f"{kind}-mc driver iteration stalled")

    Y = np.empty((n + 1, m))
    Z = np.empty((n, m))
    dK = np.zeros((n, m))
    V = np.asarray(obs.phi(ensemble.X[n]), dtype=float)
    Y[n] = V.copy()

    batch_y0 = None
    for k in range(n - 1, -1, -1):
        t = float(ensemble.t_nodes[k])
        xk = ensemble.X[k]
        h_k = np.broadcast_to(np.asarray(obs.h(t, xk), dtype=float), (m,)).astype(float)
        if k == 0:
            cont = np.full(m, V.mean())
            # centering the Z target with the fitted continuation changes
            # nothing in expectation (E[C(X) dW] = 0) and removes the O(1/dt)
            # variance carried by the level of V
            z_target = (V - cont) * ensemble.dW[k] / dt
            zk = np.full(m, z_target.mean())
            batch_y0 = []
            for sl in _batch_slices(m):
                cont_b = np.full(sl.stop - sl.start, V[sl].mean())
                zk_b = np.full(sl.stop - sl.start,
                               ((V[sl] - V[sl].mean()) * ensemble.dW[k, sl] / dt).mean())
                yb, _ = resolve(t, xk[sl], cont_b, zk_b, h_k[sl])
                batch_y0.append(float(yb.mean()))
        else:
            design = _design_matrix(xk, basis_degree)
            cont = design @ _regress(design, V)
            z_target = (V - cont) * ensemble.dW[k] / dt
            zk = design @ _regress(design, z_target)
        y_fit, c_fit = resolve(t, xk, cont, zk, h_k)
        f_val = np.asarray(f(t, xk, y_fit, zk), dtype=float)
        if kind == "reflected":
            dK[k] = np.maximum(h_k - c_fit, 0.0)
            V = np.where(h_k >= c_fit, h_k, V + dt * f_val)
        else:
            # same implicit scalar map applied to the realized value on the
            # fitted active set, so accumulated regression noise is damped
            # toward h instead of compounding through the stiff penalty
            dK[k] = dt * nq * np.maximum(h_k - y_fit, 0.0)
            vstar = V + dt * f_val
            V = np.where(c_fit < h_k, (vstar + dt * nq * h_k) / (1.0 + dt * nq), vstar)
        Y[k] = y_fit
        Z[k] = zk

    y0 = float(Y[0].mean())
    ci = 1.96 * float(np.std(batch_y0, ddof=1)) / np.sqrt(len(batch_y0))
    slack = 0.0
    for k in range(n + 1):
        t = float(ensemble.t_nodes[k])
        h_k = np.asarray(obs.h(t, ensemble.X[k]), dtype=float)
        slack = max(slack, float(np.max(h_k - Y[k])))
    return Y, Z, dK, y0, ci, max(slack, 0.0)


def rbsde_penalized_mc(spec: ObstacleProblemSpec, ensemble: PathEnsemble, n_penalty: int,
                       basis_degree: int = 3) -> RbsdeEstimate:
    """Least-squares Monte Carlo for the BSDE with driver f + n (y - h)^-.

    The stiff penalty is resolved per path by the exact scalar implicit step,
    and K accumulates n (Y - h)^- dt.
    """
    Y, Z, dK, y0, ci, slack = _mc_backward(spec, ensemble, basis_degree, "penalized",
                                           n_penalty=float(n_penalty))
    return RbsdeEstimate(scheme="penalized-mc", Y0=y0, ci=ci, t_nodes=ensemble.t_nodes.copy(),
                         Y=Y, Z=Z, dK=dK, n_penalty=n_penalty, basis_degree=basis_degree,
                         obstacle_slack=slack)


def rbsde_reflected_mc(spec: ObstacleProblemSpec, ensemble: PathEnsemble,
                       basis_degree: int = 3) -> RbsdeEstimate:
    """Discretely reflected LSMC: Y = max(h, continuation + dt f), and K grows
    by the reflection deficit only where the obstacle binds."""
    Y, Z, dK, y0, ci, slack = _mc_backward(spec, ensemble, basis_degree, "reflected")
    return RbsdeEstimate(scheme="reflected-mc", Y0=y0, ci=ci, t_nodes=ensemble.t_nodes.copy(),
                         Y=Y, Z=Z, dK=dK, basis_degree=basis_degree, obstacle_slack=slack)


@dataclass
class ConvergenceTable:
    n_schedule: list
    y_distance: np.ndarray
    k_distance: np.ndarray
    y_ci: np.ndarray
    k_ci: np.ndarray


def penalization_convergence_mc(spec: ObstacleProblemSpec, ensemble: PathEnsemble,
                                n_schedule, basis_degree: int = 3) -> ConvergenceTable:
    """Sup-in-time estimator distances between the penalized and reflected
    schemes under common random numbers, per penalty level."""
    ref = rbsde_reflected_mc(spec, ensemble, basis_degree)
    ref_K = ref.K_cumulative()
    rows_y, rows_k, ci_y, ci_k = [], [], [], []
    slices = _batch_slices(ensemble.path_count)
    for n in n_schedule:
        pen = rbsde_penalized_mc(spec, ensemble, int(n), basis_degree)
        pen_K = pen.K_cumulative()

        def sup_rms(a, b, sl=slice(None)):
            d = a[:, sl] - b[:, sl]
            return float(np.max(np.sqrt(np.mean(d * d, axis=1))))

        rows_y.append(sup_rms(pen.Y, ref.Y))
        rows_k.append(sup_rms(pen_K, ref_K))
        by = [sup_rms(pen.Y, ref.Y, sl) for sl in slices]
        bk = [sup_rms(pen_K, ref_K, sl) for sl in slices]
        ci_y.append(1.96 * float(np.std(by, ddof=1)) / np.sqrt(len(by)))
        ci_k.append(1.96 * float(np.std(bk, ddof=1)) / np.sqrt(len(bk)))
    return ConvergenceTable(n_schedule=[int(n) for n in n_schedule],
                            y_distance=np.asarray(rows_y), k_distance=np.asarray(rows_k),
                            y_ci=np.asarray(ci_y), k_ci=np.asarray(ci_k))


# ---------------------------------------------------------------------------
# optimal stopping

@dataclass
class StoppingValue:
    rule_value: float
    rule_ci: float
    snell_value: float
    gap: float


def snell_envelope_value(spec: ObstacleProblemSpec, grid: SpaceTimeGrid,
                         reward_field: np.ndarray, s_index: int, x_index: int,
                         scheme: str = "implicit") -> float:
    """Exhaustive optimal-stopping value on the grid chain by backward induction.

    ``reward_field`` is the running reward f evaluated along the solved field,
    one row per time slice.
    """
    clamp = spec.boundary_mode == "clamp-to-data"
    h_field = obstacle_field(spec, grid)
    bnd = boundary_values(spec, grid, h_field) if clamp else None
    V = terminal_field(spec, grid).copy()
    for k in range(grid.nt - 1, s_index - 1, -1):
        cont = _kernel_apply(spec, grid, k, V, scheme)
        V = np.maximum(h_field[k], cont + grid.dt * reward_field[k])
        if clamp:
            V[0], V[-1] = bnd[k]
    return float(V[x_index])


def solution_reward_field(spec: ObstacleProblemSpec, grid: SpaceTimeGrid,
                          sol: ObstacleSolution) -> np.ndarray:
    """f(t, x, u, sigma Du) on the grid, frozen along the solved field."""
    out = np.empty_like(sol.u_values)
    for k, t in enumerate(grid.t_nodes):
        sig = _sigma_row(spec, float(t), grid.x_nodes)
        z = sig * central_gradient(sol.u_values[k], grid.dx)
        out[k] = spec.driver.f(float(t), grid.x_nodes, sol.u_values[k], z)
    return out


def optimal_stopping_value(spec: ObstacleProblemSpec, grid: SpaceTimeGrid,
                           sol: ObstacleSolution, ensemble: PathEnsemble,
                           s: float, x: float, scheme: str = "implicit") -> StoppingValue:
    """Value of the first-contact stopping rule versus the exhaustive chain value.

    The rule stops at the first time u(t, X_t) touches the obstacle (within
    the contact tolerance); its value is estimated along the ensemble, with
    the running reward read from the solved field.
    """
    h_field = obstacle_field(spec, grid)
    ctol = 1e-9 * (1.0 + float(np.max(np.abs(h_field))))
    gap_field = sol.u_values - h_field
    sig_field = np.empty_like(sol.u_values)
    z_field = np.empty_like(sol.u_values)
    for k, t in enumerate(grid.t_nodes):
        sig_field[k] = _sigma_row(spec, float(t), grid.x_nodes)
        z_field[k] = sig_field[k] * central_gradient(sol.u_values[k], grid.dx)

    n, m = ensemble.n_steps, ensemble.path_count
    dt = ensemble.dt_path
    reward = np.zeros(m)
    alive = np.ones(m, dtype=bool)
    for k in range(n):
        t = float(ensemble.t_nodes[k])
        xk = ensemble.X[k]
        if not alive.any():
            break
        g = interp_space_time(grid, gap_field, t, xk[alive])
        idx = np.flatnonzero(alive)
        stop_now = g <= ctol
        stopping = idx[stop_now]
        if stopping.size:
            reward[stopping] += np.asarray(spec.obstacle.h(t, xk[stopping]), dtype=float)
            alive[stopping] = False
        running = idx[~stop_now]
        if running.size:
            u_itp = interp_space_time(grid, sol.u_values, t, xk[running])
            z_itp = interp_space_time(grid, z_field, t, xk[running])
            fval = np.asarray(spec.driver.f(t, xk[running], u_itp, z_itp), dtype=float)
            reward[running] += np.broadcast_to(fval, running.shape) * dt
    if alive.any():
        reward[alive] += np.asarray(spec.obstacle.phi(ensemble.X[n, alive]), dtype=float)

    rule_value = float(reward.mean())
    rule_ci = 1.96 * float(reward.std(ddof=1)) / np.sqrt(m) if m > 1 else 0.0
    s_index = int(np.clip(round(s / grid.dt), 0, grid.nt - 1))
    x_index = int(np.clip(round((x - grid.x_nodes[0]) / grid.dx), 0, grid.nx + 1))
    snell = snell_envelope_value(spec, grid, solution_reward_field(spec, grid, sol),
                                 s_index, x_index, scheme=scheme)
    return StoppingValue(rule_value=rule_value, rule_ci=rule_ci, snell_value=snell,
                         gap=abs(rule_value - snell))
