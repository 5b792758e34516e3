"""Stochastic recursive bilevel optimization for finite-sum problems."""

__version__ = "0.1.0"

from .baselines import fullbatch_gd_run, soba_run
from .directions import (
    DirectionTriple,
    JointState,
    full_directions,
    project_state,
    project_v,
    sampled_directions,
)
from .errors import (
    ConfigurationError,
    DimensionMismatchError,
    DivergenceError,
    EmptyDatasetError,
    EnumerationTooLargeError,
    NonConvergenceError,
    NumericInputError,
    OracleRangeError,
    ParseError,
    PreconditionError,
    SrbaError,
)
from .oracle import BilevelProblem, OracleLedger, Regularity, full_batch, query_oracle
from .solver import IndexStream, SolverRunResult, SrbaConfig, TraceRecord, sarah_step, srba_run

__all__ = [
    "BilevelProblem",
    "ConfigurationError",
    "DimensionMismatchError",
    "DirectionTriple",
    "DivergenceError",
    "EmptyDatasetError",
    "EnumerationTooLargeError",
    "IndexStream",
    "JointState",
    "NonConvergenceError",
    "NumericInputError",
    "OracleLedger",
    "OracleRangeError",
    "ParseError",
    "PreconditionError",
    "Regularity",
    "SolverRunResult",
    "SrbaConfig",
    "SrbaError",
    "TraceRecord",
    "full_batch",
    "full_directions",
    "fullbatch_gd_run",
    "project_state",
    "project_v",
    "query_oracle",
    "sampled_directions",
    "sarah_step",
    "soba_run",
    "srba_run",
]
