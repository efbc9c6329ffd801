"""BDF2/Adams-Bashforth convex splitting with extrapolation and preconditioning."""

from .schedules import BetaSchedule, OmegaSchedule
from .solvers import LineSearchParams, SolverConfig, StopRule, Trace, run
from .splitting import L1QuadraticProblem, QuadraticLinearProblem, validate_step

__version__ = "0.1.0"

__all__ = [
    "BetaSchedule",
    "OmegaSchedule",
    "SolverConfig",
    "StopRule",
    "LineSearchParams",
    "Trace",
    "run",
    "L1QuadraticProblem",
    "QuadraticLinearProblem",
    "validate_step",
    "__version__",
]
