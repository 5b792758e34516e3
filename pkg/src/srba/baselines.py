"""Reference solvers: full-batch bilevel gradient descent and SOBA."""

from __future__ import annotations

from typing import Optional

from .directions import batch_directions, full_directions
from .oracle import BilevelProblem, OracleLedger
from .solver import (
    IndexStream,
    Monitor,
    SolverRunResult,
    SrbaConfig,
    _Recorder,
    descend,
    initial_state,
)


def fullbatch_gd_run(problem: BilevelProblem, config: SrbaConfig,
                     monitor: Optional[Monitor] = None) -> SolverRunResult:
    """Simultaneous full-batch steps on (z, v, x) for ``T`` iterations.

    ``q`` is ignored. Rows are labelled like SRBA with ``q = 1`` so that the
    two traces can be compared row for row.
    """
    config.validate()
    R = config.radius(problem)
    ledger = OracleLedger()
    u = initial_state(problem, config)
    rec = _Recorder(config, ledger, monitor, config.T + 1)
    rec.record(0, 0, u, initial=True)
    for t in range(config.T):
        D = full_directions(problem, u, ledger)
        u = descend(u, D.scaled(config.rho, config.gamma), R)
        rec.record(t, 1, u, None)
    return rec.result(u)


def soba_run(problem: BilevelProblem, config: SrbaConfig,
             monitor: Optional[Monitor] = None) -> SolverRunResult:
    """Single-loop unbiased stochastic scheme.

    Iteration ``t`` (1-based for the schedule) draws a minibatch and steps
    with ``rho_t = rho t^-a``, ``gamma_t = gamma t^-b``; ``(a, b)`` is
    ``config.step_decay``. ``q`` is ignored.
    """
    config.validate()
    R = config.radius(problem)
    ledger = OracleLedger()
    stream = IndexStream(config.seed, problem.n, problem.m, config.batch_size)
    a, b = config.step_decay
    u = initial_state(problem, config)
    rec = _Recorder(config, ledger, monitor, config.T + 1)
    rec.record(0, 0, u, initial=True)
    for t in range(config.T):
        rho_t = config.rho * (t + 1) ** (-a)
        gamma_t = config.gamma * (t + 1) ** (-b)
        i_idx, j_idx = stream.draw(t, 0)
        D = batch_directions(problem, u, i_idx, j_idx, ledger)
        u = descend(u, D.scaled(rho_t, gamma_t), R)
        rec.record(t, 1, u, (i_idx, j_idx))
    return rec.result(u)
