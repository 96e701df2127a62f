"""Exception types raised by the solvers and checks."""


class ParobsError(Exception):
    """Base class for all package errors."""


class EvaluatorFailure(ParobsError):
    """An evaluator returned a non-finite value at a probe point."""


class ScenarioError(ParobsError):
    """A scenario file is missing, malformed, or fails validation."""


class CflViolation(ParobsError):
    """Explicit transition kernel requested with dt > dx^2 / Lambda."""


class GridTooCoarse(ParobsError):
    """A diagnostic has an empty evaluation region on this grid."""


class InnerDivergence(ParobsError):
    """Per-step fixed-point iteration failed to converge."""


class MonotonicityViolation(ParobsError):
    """Penalized solutions failed to increase nodewise along the schedule."""


class LcpStall(ParobsError):
    """PSOR complementarity residual plateaued above tolerance."""


class NoContraction(ParobsError):
    """Outer Picard iteration expanded for several consecutive steps."""


class MissingDerivative(ParobsError):
    """Path simulation requires the spatial derivative of the diffusion coefficient."""


class RegressionSingular(ParobsError):
    """Least-squares design matrix is rank deficient (basis too rich for the sample)."""
