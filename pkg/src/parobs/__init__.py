"""Numerical toolkit for parabolic obstacle problems in divergence form.

Solves the Cauchy obstacle problem by penalization and by a projected-SOR
complementarity oracle, simulates the associated diffusion and reflected
BSDE, and machine-checks the representation identities tying the two halves
together.
"""

from .errors import (
    CflViolation,
    EvaluatorFailure,
    GridTooCoarse,
    InnerDivergence,
    LcpStall,
    MissingDerivative,
    MonotonicityViolation,
    NoContraction,
    ParobsError,
    RegressionSingular,
    ScenarioError,
)
from .grid import (
    DensityTable,
    DiscreteOperator,
    SpaceTimeGrid,
    TransitionKernel,
    aronson_envelope_check,
    assemble_operator,
    interp_space_time,
    solve_density,
    transition_kernel,
)
from .problem import (
    Coefficients,
    Driver,
    HypothesisReport,
    ObstacleData,
    ObstacleProblemSpec,
    Weight,
    lipschitz_probe,
    validate_hypotheses,
)
from .scenarios import Scenario, build_family, load_scenario
from .solver import (
    ObstacleSolution,
    PenalizedSolution,
    PicardTrace,
    apriori_norm_report,
    as_obstacle_solution,
    contraction_gamma,
    energy_identity_residual,
    obstacle_replacement_check,
    obstacle_stability,
    penalization_study,
    picard_outer,
    solve_penalized,
    solve_psor,
    solve_unconstrained,
)
from .stochastic import (
    PathEnsemble,
    RbsdeEstimate,
    estimate_g_integral,
    moment_ratio_probe,
    optimal_stopping_value,
    penalization_convergence_mc,
    rbsde_chain_dp,
    rbsde_penalized_mc,
    rbsde_reflected_mc,
    simulate_paths,
    snell_envelope_value,
)
from .verify import (
    CheckReport,
    check_ac_measure,
    check_interval_measure,
    check_measure_identity,
    check_minimality,
    check_representation_u,
    check_representation_z,
    check_skorokhod,
    check_weighted_bounds,
)

__version__ = "0.1.0"
