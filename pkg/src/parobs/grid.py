"""Space-time grid, flux-form operator, Markov transition kernels, densities.

The operator is assembled in finite-volume (flux) form at cell midpoints,

    (A u)_i = (1 / (2 dx^2)) [ a_{i+1/2} (u_{i+1} - u_i) - a_{i-1/2} (u_i - u_{i-1}) ],

which preserves the divergence structure exactly: interior row sums are zero
and discrete summation by parts holds to machine precision.  The grid carries
nx interior nodes plus the two truncation-boundary nodes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from .errors import CflViolation, GridTooCoarse
from .problem import ObstacleProblemSpec

__all__ = [
    "SpaceTimeGrid",
    "DiscreteOperator",
    "TransitionKernel",
    "DensityTable",
    "AronsonEnvelope",
    "assemble_operator",
    "transition_kernel",
    "solve_density",
    "aronson_envelope_check",
    "interp_space_time",
]


@dataclass(frozen=True)
class SpaceTimeGrid:
    nx: int
    nt: int
    dx: float
    dt: float
    x_nodes: np.ndarray  # nx + 2 positions, boundary included
    t_nodes: np.ndarray  # nt + 1 times, t_0 = 0, t_nt = T

    @classmethod
    def build(cls, spec: ObstacleProblemSpec, nx: int, nt: int) -> "SpaceTimeGrid":
        if nx < 1 or nt < 1:
            raise ValueError("nx and nt must be positive")
        x_nodes = np.linspace(spec.x_lo, spec.x_hi, nx + 2)
        t_nodes = np.linspace(0.0, spec.T, nt + 1)
        dx = (spec.x_hi - spec.x_lo) / (nx + 1)
        dt = spec.T / nt
        return cls(nx=nx, nt=nt, dx=dx, dt=dt, x_nodes=x_nodes, t_nodes=t_nodes)

    @property
    def interior(self) -> slice:
        return slice(1, self.nx + 1)


@dataclass(frozen=True)
class DiscreteOperator:
    """Tridiagonal action of the flux-form operator on one time slice.

    ``lower``, ``diag``, ``upper`` are the coefficients of rows 1..nx (the
    interior nodes); ``lower[i]`` multiplies the left neighbour of interior
    node i, which for i = 0 is the boundary node.
    """

    t_index: int
    t: float
    lower: np.ndarray
    diag: np.ndarray
    upper: np.ndarray

    def apply(self, u_full: np.ndarray) -> np.ndarray:
        """(A u) at interior nodes; u_full includes boundary values."""
        return (self.lower * u_full[:-2] + self.diag * u_full[1:-1]
                + self.upper * u_full[2:])

    def row_sums(self) -> np.ndarray:
        return self.lower + self.diag + self.upper


def assemble_operator(spec: ObstacleProblemSpec, grid: SpaceTimeGrid, t_index: int) -> DiscreteOperator:
    if not 0 <= t_index <= grid.nt:
        raise ValueError(f"t_index {t_index} out of range")
    t = float(grid.t_nodes[t_index])
    mid = 0.5 * (grid.x_nodes[:-1] + grid.x_nodes[1:])  # nx + 1 midpoints
    a_mid = np.asarray(spec.coefficients.a(t, mid), dtype=float)
    if a_mid.shape != mid.shape:
        a_mid = np.broadcast_to(a_mid, mid.shape).astype(float)
    scale = 1.0 / (2.0 * grid.dx**2)
    lower = a_mid[:-1] * scale
    upper = a_mid[1:] * scale
    return DiscreteOperator(t_index=t_index, t=t, lower=lower, diag=-(lower + upper), upper=upper)


def _banded_backward_matrix(op: DiscreteOperator, dt: float, extra_diag=None,
                            mode: str = "clamp-to-data"):
    """Banded form of the full (nx+2) system (I - dt A).

    clamp-to-data: boundary rows are identity (Dirichlet).  reflecting:
    boundary rows keep only the inner face flux (zero flux through the
    truncation), which preserves constants and conserves mass.  ``extra_diag``
    adds to the diagonal: interior length nx, or full length nx + 2 in
    reflecting mode.
    """
    n = op.diag.size + 2
    ab = np.zeros((3, n))
    ab[1, 1:-1] = 1.0 - dt * op.diag
    ab[0, 2:] = -dt * op.upper   # superdiagonal M[j-1, j] for interior rows
    ab[2, :n - 2] = -dt * op.lower  # subdiagonal M[j+1, j] for interior rows
    if mode == "clamp-to-data":
        ab[1, 0] = ab[1, -1] = 1.0
    elif mode == "reflecting":
        ab[1, 0] = 1.0 + dt * op.lower[0]
        ab[0, 1] = -dt * op.lower[0]
        ab[1, -1] = 1.0 + dt * op.upper[-1]
        ab[2, -2] = -dt * op.upper[-1]
    else:
        raise ValueError(f"unknown boundary mode {mode!r}")
    if extra_diag is not None:
        extra_diag = np.asarray(extra_diag, dtype=float)
        if extra_diag.size == n:
            ab[1] += extra_diag
        else:
            ab[1, 1:-1] += extra_diag
    return ab


def solve_backward_step(op: DiscreteOperator, dt: float, rhs_full: np.ndarray,
                        extra_diag=None, mode: str = "clamp-to-data") -> np.ndarray:
    """Solve (I - dt A) u = rhs on the full node set.

    Under clamp-to-data the boundary rows are identity, so rhs_full[0] and
    rhs_full[-1] are the boundary values themselves; under reflecting all
    nodes are unknowns.  ``extra_diag`` adds to the diagonal (used for the
    implicit penalty term).
    """
    ab = _banded_backward_matrix(op, dt, extra_diag, mode)
    return solve_banded((1, 1), ab, rhs_full)


@dataclass(frozen=True)
class TransitionKernel:
    """One-step Markov law of the grid chain over dt (row-stochastic)."""

    t_index: int
    scheme: str
    P: np.ndarray
    clamp_magnitude: float

    def apply(self, v: np.ndarray) -> np.ndarray:
        return self.P @ v

    def apply_T(self, p: np.ndarray) -> np.ndarray:
        return self.P.T @ p


def reflecting_step_matrix(spec: ObstacleProblemSpec, grid: SpaceTimeGrid, t_index: int) -> np.ndarray:
    """Banded (I - dt A) with zero-flux rows at the truncation.

    The reflecting variant conserves interior mass under transpose evolution;
    it is the standard surrogate for 'the domain continues beyond the
    truncation' when accounting measure mass up to the edge.
    """
    op = assemble_operator(spec, grid, t_index)
    return _banded_backward_matrix(op, grid.dt, mode="reflecting")


def transition_kernel(spec: ObstacleProblemSpec, grid: SpaceTimeGrid, t_index: int,
                      scheme: str = "implicit", mode: str | None = None) -> TransitionKernel:
    """Transition kernel for the step t_index -> t_index + 1.

    Explicit: P = I + dt A, valid under the positivity CFL dt <= dx^2 / Lambda.
    Implicit: P = (I - dt A)^{-1}; the M-matrix structure makes P nonnegative,
    tiny negative round-off is clamped to zero and the clamp magnitude kept.
    Boundary rows absorb under clamp-to-data and bounce under reflecting.
    """
    op = assemble_operator(spec, grid, t_index)
    mode = spec.boundary_mode if mode is None else mode
    n = grid.nx + 2
    if scheme == "explicit":
        if grid.dt > grid.dx**2 / spec.coefficients.Lambda_ell * (1.0 + 1e-12):
            raise CflViolation(
                f"explicit kernel needs dt <= dx^2/Lambda = {grid.dx**2 / spec.coefficients.Lambda_ell:.3e},"
                f" got dt = {grid.dt:.3e}")
        P = np.eye(n)
        idx = np.arange(1, n - 1)
        P[idx, idx] += grid.dt * op.diag
        P[idx, idx - 1] += grid.dt * op.lower
        P[idx, idx + 1] += grid.dt * op.upper
        if mode == "reflecting":
            P[0, 0] = 1.0 - grid.dt * op.lower[0]
            P[0, 1] = grid.dt * op.lower[0]
            P[-1, -1] = 1.0 - grid.dt * op.upper[-1]
            P[-1, -2] = grid.dt * op.upper[-1]
        clamp = 0.0
    elif scheme == "implicit":
        ab = _banded_backward_matrix(op, grid.dt, mode=mode)
        P = solve_banded((1, 1), ab, np.eye(n))
        clamp = float(max(0.0, -P.min()))
        np.clip(P, 0.0, None, out=P)
    else:
        raise ValueError(f"unknown kernel scheme {scheme!r}")
    return TransitionKernel(t_index=t_index, scheme=scheme, P=P, clamp_magnitude=clamp)


@dataclass(frozen=True)
class DensityTable:
    """Discrete fundamental solution started from a unit point mass.

    ``values[k]`` is the probability mass per node at t_nodes[k]; divide by dx
    for a density.  ``mass`` tracks interior mass per slice; everything lost
    through the truncation boundary sits in the absorbing boundary nodes.
    """

    s_index: int
    x_index: int
    t_nodes: np.ndarray
    x_nodes: np.ndarray
    dx: float
    values: np.ndarray  # (n_slices, nx + 2) mass per node
    mass: np.ndarray
    mass_ok: bool

    def density(self) -> np.ndarray:
        return self.values / self.dx

    def to_csv(self, path, provenance: str = "") -> None:
        with open(path, "w", newline="") as fh:
            if provenance:
                fh.write(f"# {provenance}\n")
            writer = csv.writer(fh)
            writer.writerow(["t", "y", "p"])
            dens = self.density()
            for k, t in enumerate(self.t_nodes):
                for j, y in enumerate(self.x_nodes):
                    writer.writerow([_f17(t), _f17(y), _f17(dens[k, j])])


def _f17(v: float) -> str:
    return format(float(v), ".17g")


def solve_density(spec: ObstacleProblemSpec, grid: SpaceTimeGrid, s_index: int, x_index: int,
                  scheme: str = "implicit", mass_tol: float = 1e-3) -> DensityTable:
    """Forward-iterate p(t_{k+1}) = P^T p(t_k) from a point mass at (s, x).

    ``mass_ok`` flags whether every interior slice keeps mass within mass_tol
    of one; a False value signals the truncation is too narrow for this start.
    """
    if not 0 <= s_index < grid.nt:
        raise ValueError("s_index must satisfy 0 <= s_index < nt")
    if not 0 <= x_index <= grid.nx + 1:
        raise ValueError("x_index out of range")
    n_slices = grid.nt - s_index + 1
    values = np.zeros((n_slices, grid.nx + 2))
    values[0, x_index] = 1.0
    for step, k in enumerate(range(s_index, grid.nt)):
        kern = transition_kernel(spec, grid, k, scheme=scheme)
        values[step + 1] = kern.apply_T(values[step])
    mass = values[:, 1:-1].sum(axis=1)
    return DensityTable(
        s_index=s_index, x_index=x_index,
        t_nodes=grid.t_nodes[s_index:].copy(), x_nodes=grid.x_nodes.copy(),
        dx=grid.dx, values=values, mass=mass,
        mass_ok=bool(np.min(mass) >= 1.0 - mass_tol),
    )


@dataclass(frozen=True)
class AronsonEnvelope:
    c_low: float
    C_high: float
    passed: bool
    trimmed_points: int


def _envelope_gap(density: DensityTable, C: float, side: str, trim_mask: np.ndarray,
                  x0: float) -> float:
    """Worst signed violation of the C-envelope over the trimmed region.

    The reference shape is the unit-diffusion heat kernel with variance
    (t - s); the upper envelope is C g(.; C v), the lower C^{-1} g(.; v / C).
    Negative gap means the envelope holds everywhere.
    """
    worst = -np.inf
    dens = density.density()
    for k in range(1, len(density.t_nodes)):
        sel = trim_mask[k]
        if not np.any(sel):
            continue
        v = density.t_nodes[k] - density.t_nodes[0]
        r = density.x_nodes[sel] - x0
        g = np.exp(-r**2 / (2.0 * C * v)) / np.sqrt(2.0 * np.pi * C * v) if side == "upper" \
            else np.exp(-r**2 * C / (2.0 * v)) / np.sqrt(2.0 * np.pi * v / C)
        env = C * g if side == "upper" else g / C
        p = dens[k, sel]
        gap = (p - env) if side == "upper" else (env - p)
        worst = max(worst, float(gap.max()))
    return worst


def aronson_envelope_check(density: DensityTable, spec: ObstacleProblemSpec,
                           trim_mass: float = 1e-8, c_max: float = 64.0,
                           burn_in_frac: float = 0.4) -> AronsonEnvelope:
    """Fit the smallest two-sided Gaussian envelope constants for the density.

    Points carrying less than ``trim_mass`` per node are excluded, as is the
    initial layer of slices (fraction ``burn_in_frac``): the discrete kernel
    starts as a near-delta whose standardized tails carry an excess kurtosis
    of order dt / (t - s), so envelope constants are only meaningful after the
    chain has mixed.  Both envelopes are monotone in C, so bisection applies.
    """
    n_slices = len(density.t_nodes)
    if n_slices < 3:
        raise GridTooCoarse("density table has too few time slices to trim")
    first = max(1, int(burn_in_frac * (n_slices - 1)) + 1)
    trim_mask = density.values > trim_mass
    trim_mask[:first] = False
    trim_mask[:, 0] = trim_mask[:, -1] = False
    n_points = int(trim_mask.sum())
    if n_points == 0:
        raise GridTooCoarse("trimmed region is empty")
    x0 = float(density.x_nodes[density.x_index])

    def fit(side: str) -> float:
        lo, hi = 1.0, 1.0
        if _envelope_gap(density, lo, side, trim_mask, x0) <= 0.0:
            # C = 1 already works: tighten below 1 to report the smallest constant
            lo = 1.0 / c_max
            if _envelope_gap(density, lo, side, trim_mask, x0) <= 0.0:
                return lo
            hi = 1.0
        else:
            while _envelope_gap(density, hi, side, trim_mask, x0) > 0.0:
                hi *= 2.0
                if hi > c_max:
                    return float("inf")
            lo = hi / 2.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if _envelope_gap(density, mid, side, trim_mask, x0) > 0.0:
                lo = mid
            else:
                hi = mid
        return hi

    c_high = fit("upper")
    c_low = fit("lower")
    passed = np.isfinite(c_high) and np.isfinite(c_low)
    return AronsonEnvelope(c_low=float(c_low), C_high=float(c_high), passed=bool(passed),
                           trimmed_points=n_points)


def interp_space_time(grid: SpaceTimeGrid, field: np.ndarray, t, x) -> np.ndarray:
    """Interpolate a grid field: piecewise linear in x, left-constant in t.

    ``field`` has shape (nt + 1, nx + 2); t and x broadcast.  Queries are
    clamped to the cylinder.
    """
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    k = np.clip(np.floor(t / grid.dt + 1e-12).astype(int), 0, grid.nt)
    xq = np.clip(x, grid.x_nodes[0], grid.x_nodes[-1])
    j = np.clip(((xq - grid.x_nodes[0]) / grid.dx).astype(int), 0, grid.nx)
    w = (xq - grid.x_nodes[j]) / grid.dx
    return (1.0 - w) * field[k, j] + w * field[k, j + 1]
