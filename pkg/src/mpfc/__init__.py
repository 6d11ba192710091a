"""Model-predictive output path following for a constrained two-link robot."""
from .cost import CostWeights, stage_cost
from .dynamics import (
    DEFAULT_PARAMS,
    DEFAULT_PATH,
    AugmentedState,
    ConstraintSet,
    PathParamState,
    PathSpec,
    RobotParams,
    RobotState,
    augmented_rhs,
    integrate,
)
from .loop import ClosedLoopLog, MpfcConfig, Scenario, init_theta, run, step
from .ocp import OcpProblem, OcpSolution, SolverOptions, Transcription, shift_warm_start, solve
from .terminal_set import TerminalSet, membership, synthesize, verify_invariance
from .transverse import TransverseCoords, from_transverse, to_transverse

__version__ = "0.1.0"

__all__ = [
    "AugmentedState", "ClosedLoopLog", "ConstraintSet", "CostWeights", "DEFAULT_PARAMS",
    "DEFAULT_PATH", "MpfcConfig", "OcpProblem", "OcpSolution", "PathParamState", "PathSpec",
    "RobotParams", "RobotState", "Scenario", "SolverOptions", "TerminalSet", "Transcription",
    "TransverseCoords", "augmented_rhs", "from_transverse", "init_theta", "integrate",
    "membership", "run", "shift_warm_start", "solve", "stage_cost", "step", "synthesize",
    "to_transverse", "verify_invariance",
]
