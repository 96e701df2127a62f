"""Problem data: coefficients, driver, obstacle, weight, and hypothesis checks.

All model symbols live here.  Evaluators follow one calling convention:
``t`` is a scalar, the remaining arguments are numpy arrays (or scalars) that
broadcast together, and the result has the broadcast shape.  Evaluators must
be pure; every object in this module is immutable after construction and safe
to share across workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import qmc

from .errors import EvaluatorFailure

__all__ = [
    "Coefficients",
    "Driver",
    "ObstacleData",
    "Weight",
    "ObstacleProblemSpec",
    "HypothesisEntry",
    "HypothesisReport",
    "validate_hypotheses",
    "lipschitz_probe",
]


@dataclass(frozen=True)
class Coefficients:
    """Scalar diffusion coefficient a(t, x) with ellipticity bounds.

    ``a_x`` is the user-supplied spatial derivative; it is required for path
    simulation (the Ito drift is a_x / 2) and deliberately not derived by
    automatic differentiation, so that simulation bias cannot be confounded
    with differentiation error.
    """

    a: Callable
    a_x: Callable | None
    lambda_ell: float
    Lambda_ell: float

    def __post_init__(self):
        if not (0.0 < self.lambda_ell <= self.Lambda_ell):
            raise ValueError("need 0 < lambda_ell <= Lambda_ell")

    def sigma(self, t, x):
        return np.sqrt(self.a(t, x))


@dataclass(frozen=True)
class Driver:
    """Right-hand side f(t, x, y, z) with Lipschitz and growth constants.

    ``L`` bounds |df| by L(|dy| + |dz|), ``M_growth`` and ``g`` bound
    |f| <= g(t, x) + M_growth (|y| + |z|).
    """

    f: Callable
    L: float
    M_growth: float
    g: Callable

    def __post_init__(self):
        if self.L < 0 or self.M_growth < 0:
            raise ValueError("Lipschitz and growth constants must be nonnegative")


@dataclass(frozen=True)
class ObstacleData:
    """Obstacle h(t, x), terminal value phi(x), and the growth pair (c, beta)
    certifying |h| <= c (1 + x^2)^beta."""

    h: Callable
    phi: Callable
    h_growth: tuple[float, float] = (1.0, 1.0)


@dataclass(frozen=True)
class Weight:
    """Polynomial weight rho(x) = (1 + x^2)^(-alpha), alpha >= 0."""

    alpha: float = 0.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")

    def rho(self, x):
        return (1.0 + np.asarray(x, dtype=float) ** 2) ** (-self.alpha)


@dataclass(frozen=True)
class ObstacleProblemSpec:
    """Full problem statement on the truncated cylinder [0, T] x [x_lo, x_hi]."""

    coefficients: Coefficients
    driver: Driver
    obstacle: ObstacleData
    T: float
    weight: Weight = field(default_factory=Weight)
    x_lo: float = -8.0
    x_hi: float = 8.0
    boundary_mode: str = "clamp-to-data"

    def __post_init__(self):
        if self.T <= 0:
            raise ValueError("T must be positive")
        if not self.x_lo < self.x_hi:
            raise ValueError("need x_lo < x_hi")
        if self.boundary_mode not in ("clamp-to-data", "reflecting"):
            raise ValueError(f"unknown boundary mode {self.boundary_mode!r}")


@dataclass(frozen=True)
class HypothesisEntry:
    name: str
    max_violation: float
    witness: tuple
    passed: bool


@dataclass(frozen=True)
class HypothesisReport:
    entries: tuple[HypothesisEntry, ...]
    passed: bool

    def entry(self, name: str) -> HypothesisEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)


_REL_TOL = 1e-12


def _finite_or_raise(values, what, where):
    values = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(values)):
        bad = np.argwhere(~np.isfinite(values))
        raise EvaluatorFailure(f"{what} is non-finite at probe {where} (index {bad[0]})")
    return values


def _rel_excess(lhs, rhs):
    """Relative amount by which lhs exceeds rhs (0 when lhs <= rhs)."""
    return np.maximum(lhs - rhs, 0.0) / (1.0 + np.abs(rhs))


def _probe_points(spec: ObstacleProblemSpec, probe_count: int, seed: int):
    """Deterministic quasi-random probes in Q_T x value-space.

    The (y, z) box is scaled from the sampled data so moderate solution values
    are representative probes.
    """
    halton = qmc.Halton(d=4, seed=seed)
    raw = halton.random(probe_count)
    t = raw[:, 0] * spec.T
    x = spec.x_lo + raw[:, 1] * (spec.x_hi - spec.x_lo)
    phi_x = _finite_or_raise(spec.obstacle.phi(x), "phi", "probe grid")
    scale = 2.0 * (1.0 + float(np.max(np.abs(phi_x))))
    y = (2.0 * raw[:, 2] - 1.0) * scale
    z = (2.0 * raw[:, 3] - 1.0) * scale
    return t, x, y, z


def validate_hypotheses(spec: ObstacleProblemSpec, probe_count: int = 256, seed: int = 0) -> HypothesisReport:
    """Check ellipticity, the driver bounds, obstacle growth, and phi >= h(T, .)
    on a deterministic set of quasi-random probes.

    Returns a per-hypothesis report with the worst violation and its witness
    point; the report passes iff all relative violations are <= 1e-12.
    """
    if probe_count < 1:
        raise ValueError("probe_count must be >= 1")
    t, x, y, z = _probe_points(spec, probe_count, seed)
    coef, drv, obs = spec.coefficients, spec.driver, spec.obstacle
    entries = []

    def record(name, violations, witnesses):
        violations = np.asarray(violations, dtype=float)
        k = int(np.argmax(violations))
        entries.append(
            HypothesisEntry(
                name=name,
                max_violation=float(violations[k]),
                witness=tuple(float(w[k]) for w in witnesses),
                passed=bool(violations[k] <= _REL_TOL),
            )
        )

    a_vals = np.empty_like(x)
    for i in range(len(t)):
        a_vals[i] = _finite_or_raise(coef.a(t[i], x[i]), "a", (t[i], x[i]))
    viol = np.maximum(_rel_excess(coef.lambda_ell, a_vals), _rel_excess(a_vals, coef.Lambda_ell))
    record("ellipticity", viol, (t, x))

    lhat, lw = _lipschitz_scan(drv, t, x, y, z)
    lip_viol = _rel_excess(lhat, drv.L * (1.0 + 1e-9))
    record("driver-lipschitz", [lip_viol], ([lw[0]], [lw[1]]))

    f_vals = np.empty_like(x)
    g_vals = np.empty_like(x)
    for i in range(len(t)):
        f_vals[i] = _finite_or_raise(drv.f(t[i], x[i], y[i], z[i]), "f", (t[i], x[i], y[i], z[i]))
        g_vals[i] = _finite_or_raise(drv.g(t[i], x[i]), "g", (t[i], x[i]))
    bound = g_vals + drv.M_growth * (np.abs(y) + np.abs(z))
    record("driver-growth", _rel_excess(np.abs(f_vals), bound), (t, x, y, z))

    h_vals = np.empty_like(x)
    for i in range(len(t)):
        h_vals[i] = _finite_or_raise(obs.h(t[i], x[i]), "h", (t[i], x[i]))
    c_gr, beta = obs.h_growth
    record("obstacle-growth", _rel_excess(np.abs(h_vals), c_gr * (1.0 + x**2) ** beta), (t, x))

    phi_T = _finite_or_raise(obs.phi(x), "phi", "terminal probes")
    h_T = _finite_or_raise(obs.h(spec.T, x), "h(T, .)", "terminal probes")
    record("terminal-dominates-obstacle", _rel_excess(h_T, phi_T), (np.full_like(x, spec.T), x))

    return HypothesisReport(entries=tuple(entries), passed=all(e.passed for e in entries))


def _lipschitz_scan(driver: Driver, t, x, y, z):
    """Max of |df| / (|dy| + |dz|) over axis-aligned and mixed probe pairs."""
    best = 0.0
    witness = (0.0, 0.0)
    dy = 0.5 * (1.0 + np.max(np.abs(y)))
    for i in range(len(t)):
        f0 = float(np.asarray(_finite_or_raise(driver.f(t[i], x[i], y[i], z[i]), "f", i)))
        # axis-aligned pairs catch drivers whose worst direction is a single coordinate
        probes = ((y[i] + dy, z[i]), (y[i], z[i] + dy), (y[i] - dy, z[i] + dy))
        for yy, zz in probes:
            f1 = float(np.asarray(_finite_or_raise(driver.f(t[i], x[i], yy, zz), "f", i)))
            denom = abs(yy - y[i]) + abs(zz - z[i])
            ratio = abs(f1 - f0) / denom
            if ratio > best:
                best, witness = ratio, (t[i], x[i])
    return best, witness


def lipschitz_probe(driver: Driver, probe_count: int = 128, seed: int = 0,
                    t_range: tuple[float, float] = (0.0, 1.0),
                    x_range: tuple[float, float] = (-8.0, 8.0),
                    value_scale: float = 4.0) -> float:
    """Estimate the driver's Lipschitz constant in (y, z) by probing pairs.

    The estimate is the max of |df| / (|dy| + |dz|) over quasi-random base
    points and axis-aligned displacements, which attains the exact constant
    for drivers that are linear in (y, z).
    """
    if probe_count < 2:
        raise ValueError("probe_count must be >= 2")
    halton = qmc.Halton(d=4, seed=seed)
    raw = halton.random(probe_count)
    t = t_range[0] + raw[:, 0] * (t_range[1] - t_range[0])
    x = x_range[0] + raw[:, 1] * (x_range[1] - x_range[0])
    y = (2.0 * raw[:, 2] - 1.0) * value_scale
    z = (2.0 * raw[:, 3] - 1.0) * value_scale
    best, _ = _lipschitz_scan(driver, t, x, y, z)
    return best
