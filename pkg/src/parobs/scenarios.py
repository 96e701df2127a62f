"""Scenario files: flat key/value text with dotted sections, builtin families.

Schema (all numeric values parse as floats unless noted):

    scenario.name        = <string>
    problem.family       = constant | sine-coef | american-put | custom-polynomial
    problem.T            = horizon
    problem.x_lo, problem.x_hi = truncation interval
    problem.alpha        = weight exponent (rho = (1 + x^2)^(-alpha))
    problem.*            = family parameters, see the builders below
    grid.nx, grid.nt     = reference resolution (ints)
    mc.paths, mc.seed    = ensemble size and master seed (ints)
    mc.dt_path           = path step
    mc.basis_degree      = regression basis degree (int)
    tolerances.*         = optional solver tolerance overrides
    calibration.*        = frozen bias constants from the refinement pre-study

Lines starting with '#' are comments.  Unknown keys are rejected so typos
cannot silently change a run.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ScenarioError
from .problem import Coefficients, Driver, ObstacleData, ObstacleProblemSpec, Weight

__all__ = ["Scenario", "load_scenario", "build_family", "FAMILIES"]

_SECTIONS = ("scenario", "problem", "grid", "mc", "tolerances", "calibration")
_INT_KEYS = {"grid.nx", "grid.nt", "mc.paths", "mc.seed", "mc.basis_degree"}


@dataclass
class Scenario:
    name: str
    spec: ObstacleProblemSpec
    grid_params: dict
    mc_params: dict
    tolerances: dict = field(default_factory=dict)
    calibration: dict = field(default_factory=dict)
    family: str = ""
    content_hash: str = ""
    path: str = ""


def _parse_kv(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ScenarioError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        section = key.split(".", 1)[0]
        if section not in _SECTIONS:
            raise ScenarioError(f"line {lineno}: unknown section {section!r}")
        if key in out:
            raise ScenarioError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _pop_float(kv: dict, key: str, default=None) -> float:
    if key not in kv:
        if default is None:
            raise ScenarioError(f"missing required key {key!r}")
        return float(default)
    try:
        return float(kv.pop(key))
    except ValueError as exc:
        raise ScenarioError(f"key {key!r}: {exc}") from exc


def build_family(family: str, params: dict) -> ObstacleProblemSpec:
    """Construct the problem spec for one builtin family.

    ``params`` is consumed; leftovers raise, so every parameter is spelled
    correctly or not at all.
    """
    T = _pop_float(params, "problem.T")
    x_lo = _pop_float(params, "problem.x_lo")
    x_hi = _pop_float(params, "problem.x_hi")
    alpha = _pop_float(params, "problem.alpha", 1.0)
    boundary = params.pop("problem.boundary", "clamp-to-data")
    weight = Weight(alpha=alpha)

    if family == "constant":
        c = _pop_float(params, "problem.value", 1.0)
        a0 = _pop_float(params, "problem.a0", 1.0)
        coef = Coefficients(a=lambda t, x: a0 * np.ones_like(np.asarray(x, dtype=float)),
                            a_x=lambda t, x: np.zeros_like(np.asarray(x, dtype=float)),
                            lambda_ell=a0, Lambda_ell=a0)
        driver = Driver(f=lambda t, x, y, z: np.zeros_like(np.asarray(y, dtype=float)),
                        L=0.0, M_growth=0.0,
                        g=lambda t, x: np.zeros_like(np.asarray(x, dtype=float)))
        obstacle = ObstacleData(h=lambda t, x: np.full_like(np.asarray(x, dtype=float), c),
                                phi=lambda x: np.full_like(np.asarray(x, dtype=float), c),
                                h_growth=(abs(c) + 1.0, 0.0))
    elif family == "sine-coef":
        a0 = _pop_float(params, "problem.a0", 1.0)
        amp = _pop_float(params, "problem.amp", 0.5)
        if not 0 <= amp < a0:
            raise ScenarioError("sine-coef needs 0 <= amp < a0 for ellipticity")
        bump_height = _pop_float(params, "problem.bump_height", 1.0)
        bump_width = _pop_float(params, "problem.bump_width", 1.0)
        level = _pop_float(params, "problem.obstacle_level", -10.0)

        def a_fn(t, x):
            return a0 + amp * np.sin(np.asarray(x, dtype=float)) * np.exp(-t)

        def a_x_fn(t, x):
            return amp * np.cos(np.asarray(x, dtype=float)) * np.exp(-t)

        coef = Coefficients(a=a_fn, a_x=a_x_fn, lambda_ell=a0 - amp, Lambda_ell=a0 + amp)
        driver = Driver(f=lambda t, x, y, z: np.zeros_like(np.asarray(y, dtype=float)),
                        L=0.0, M_growth=0.0,
                        g=lambda t, x: np.zeros_like(np.asarray(x, dtype=float)))
        obstacle = ObstacleData(
            h=lambda t, x: np.full_like(np.asarray(x, dtype=float), level),
            phi=lambda x: bump_height * np.exp(-0.5 * (np.asarray(x, dtype=float) / bump_width) ** 2),
            h_growth=(abs(level) + 1.0, 0.0))
    elif family == "american-put":
        strike = _pop_float(params, "problem.strike", 1.0)
        rate = _pop_float(params, "problem.rate", 0.06)
        sigma = _pop_float(params, "problem.sigma", 0.2)
        kappa = (rate - 0.5 * sigma**2) / sigma  # drift carried by the z-argument
        a0 = sigma**2
        coef = Coefficients(a=lambda t, x: a0 * np.ones_like(np.asarray(x, dtype=float)),
                            a_x=lambda t, x: np.zeros_like(np.asarray(x, dtype=float)),
                            lambda_ell=a0, Lambda_ell=a0)
        L = max(rate, abs(kappa))
        driver = Driver(f=lambda t, x, y, z: -rate * np.asarray(y, dtype=float) + kappa * np.asarray(z, dtype=float),
                        L=L, M_growth=L,
                        g=lambda t, x: np.zeros_like(np.asarray(x, dtype=float)))
        payoff = lambda x: np.maximum(strike - np.exp(np.asarray(x, dtype=float)), 0.0)
        obstacle = ObstacleData(h=lambda t, x: payoff(x), phi=payoff,
                                h_growth=(strike, 0.0))
    elif family == "custom-polynomial":
        c0 = _pop_float(params, "problem.c0", 1.0)
        c1 = _pop_float(params, "problem.c1", 0.0)
        c2 = _pop_float(params, "problem.c2", -1.0)
        a0 = _pop_float(params, "problem.a0", 1.0)
        coef = Coefficients(a=lambda t, x: a0 * np.ones_like(np.asarray(x, dtype=float)),
                            a_x=lambda t, x: np.zeros_like(np.asarray(x, dtype=float)),
                            lambda_ell=a0, Lambda_ell=a0)
        driver = Driver(f=lambda t, x, y, z: np.zeros_like(np.asarray(y, dtype=float)),
                        L=0.0, M_growth=0.0,
                        g=lambda t, x: np.zeros_like(np.asarray(x, dtype=float)))

        def poly(x):
            x = np.asarray(x, dtype=float)
            return c0 + c1 * x + c2 * x**2

        growth_c = abs(c0) + abs(c1) + abs(c2) + 1.0
        obstacle = ObstacleData(h=lambda t, x: poly(x), phi=poly, h_growth=(growth_c, 1.0))
    else:
        raise ScenarioError(f"unknown problem family {family!r}")

    if params:
        raise ScenarioError(f"unused problem parameters: {sorted(params)}")
    try:
        return ObstacleProblemSpec(coefficients=coef, driver=driver, obstacle=obstacle,
                                   T=T, weight=weight, x_lo=x_lo, x_hi=x_hi,
                                   boundary_mode=boundary)
    except ValueError as exc:
        raise ScenarioError(str(exc)) from exc


FAMILIES = ("constant", "sine-coef", "american-put", "custom-polynomial")


def load_scenario(path) -> Scenario:
    path = Path(path)
    if not path.exists():
        raise ScenarioError(f"scenario file not found: {path}")
    text = path.read_text()
    digest = hashlib.sha256(text.encode()).hexdigest()[:12]
    kv = _parse_kv(text)

    name = kv.pop("scenario.name", path.stem)
    family = kv.pop("problem.family", None)
    if family is None:
        raise ScenarioError("missing problem.family")

    problem_params = {k: v for k, v in kv.items() if k.startswith("problem.")}
    for k in problem_params:
        kv.pop(k)
    spec = build_family(family, problem_params)

    def take(section):
        out = {}
        for k in [k for k in kv if k.startswith(section + ".")]:
            short = k.split(".", 1)[1]
            out[short] = int(kv.pop(k)) if k in _INT_KEYS else float(kv.pop(k))
        return out

    grid_params = take("grid")
    mc_params = take("mc")
    tolerances = take("tolerances")
    calibration = take("calibration")
    if kv:
        raise ScenarioError(f"unused keys: {sorted(kv)}")
    grid_params.setdefault("nx", 200)
    grid_params.setdefault("nt", 200)
    mc_params.setdefault("paths", 10_000)
    mc_params.setdefault("seed", 20260808)
    mc_params.setdefault("dt_path", spec.T / grid_params["nt"])
    mc_params.setdefault("basis_degree", 3)
    return Scenario(name=name, spec=spec, grid_params=grid_params, mc_params=mc_params,
                    tolerances=tolerances, calibration=calibration, family=family,
                    content_hash=digest, path=str(path))
