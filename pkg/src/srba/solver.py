"""SRBA: stochastic recursive bilevel algorithm.

Each outer iteration ``t`` resets the scaled direction estimate
``Delta = (rho D_z, rho D_v, gamma D_x)`` with full-batch directions at the
anchor point, takes one projected step, then runs ``q - 1`` recursive
(SARAH-type) steps

    Delta <- scale * (D_ij(u^{t,k}) - D_ij(u^{t,k-1})) + Delta
    u^{t,k+1} = Proj(u^{t,k} - Delta)

where ``Proj`` rescales ``v`` into the ball of radius ``R``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator, NamedTuple, Optional

import numpy as np

from .directions import (
    DirectionTriple,
    JointState,
    batch_directions,
    full_directions,
    project_state,
)
from .errors import ConfigurationError, DivergenceError
from .oracle import BilevelProblem, OracleLedger

BLOWUP_NORM = 1e12


@dataclass
class SrbaConfig:
    """Run configuration shared by SRBA and the baselines.

    ``R=None`` derives the radius from the problem (``L0_F / mu_G``);
    ``R=math.inf`` disables the projection. ``step_decay`` is ``(a, b)``
    for the decaying schedules ``rho t^-a``, ``gamma t^-b`` used by SOBA
    (ignored by SRBA).
    """

    rho: float
    gamma: float
    q: int = 1
    T: int = 1
    R: Optional[float] = None
    seed: int = 0
    batch_size: int = 1
    step_decay: tuple = (0.0, 0.0)
    init: Optional[JointState] = None
    monitor_period: int = 1
    timing: bool = True
    record_iterates: bool = False

    def validate(self):
        if not (self.rho > 0 and math.isfinite(self.rho)):
            raise ConfigurationError(f"rho must be a positive finite real, got {self.rho}")
        if not (self.gamma > 0 and math.isfinite(self.gamma)):
            raise ConfigurationError(f"gamma must be a positive finite real, got {self.gamma}")
        if int(self.q) != self.q or self.q < 1:
            raise ConfigurationError(f"q must be an integer >= 1, got {self.q}")
        if int(self.T) != self.T or self.T < 1:
            raise ConfigurationError(f"T must be an integer >= 1, got {self.T}")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be an integer >= 1, got {self.batch_size}")
        if self.R is not None and not self.R > 0:
            raise ConfigurationError(f"R must be positive, got {self.R}")
        if int(self.monitor_period) != self.monitor_period or self.monitor_period < 1:
            raise ConfigurationError("monitor_period must be an integer >= 1")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigurationError("seed must fit in 64 bits")
        a, b = self.step_decay
        if a < 0 or b < 0:
            raise ConfigurationError("step decay exponents must be nonnegative")

    def radius(self, problem: BilevelProblem) -> float:
        if self.R is not None:
            return float(self.R)
        R = problem.regularity.default_radius()
        if R is None:
            raise ConfigurationError(
                "projection radius R is required: the problem does not provide L0_F"
            )
        return R


@dataclass
class TraceRecord:
    t: int
    k: int
    oracle_total: int
    oracle_grad_F: int
    oracle_grad1_G: int
    oracle_hvp: int
    oracle_jvp: int
    h: Optional[float] = None
    grad_h_sq: Optional[float] = None
    subopt: Optional[float] = None
    wall_ms: Optional[float] = None

    @property
    def oracle_elements(self) -> int:
        return 2 * self.oracle_grad_F + self.oracle_grad1_G + self.oracle_hvp + self.oracle_jvp


@dataclass
class SolverRunResult:
    state: JointState
    trace: list
    ledger: OracleLedger
    index_log: list = field(default_factory=list)
    iterates: Optional[list] = None
    status: str = "ok"


Monitor = Callable[[JointState], dict]


class IndexStream:
    """Seeded minibatch index stream.

    The draw for step ``(t, k)`` comes from a Philox counter-based generator
    keyed by ``seed`` whose counter's high words are ``(k, t)``, so it does
    not depend on how many numbers earlier steps consumed. Within a batch,
    indices are drawn without replacement; ``i`` and ``j`` are independent.
    """

    def __init__(self, seed: int, n: int, m: int, batch_size: int = 1):
        self.seed = int(seed)
        self.n = n
        self.m = m
        self.bi = min(batch_size, n)
        self.bj = min(batch_size, m)

    def generator(self, t: int, k: int) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=self.seed, counter=[0, 0, k, t]))

    def draw(self, t: int, k: int) -> tuple:
        rng = self.generator(t, k)
        if self.bi == 1:
            i_idx = rng.integers(self.n, size=1)
        else:
            i_idx = rng.choice(self.n, size=self.bi, replace=False)
        if self.bj == 1:
            j_idx = rng.integers(self.m, size=1)
        else:
            j_idx = rng.choice(self.m, size=self.bj, replace=False)
        return i_idx, j_idx


def sarah_step(prev: DirectionTriple, new: DirectionTriple, old: DirectionTriple,
               rho: float, gamma: float) -> DirectionTriple:
    """Recursive update of the scaled direction estimate."""
    return DirectionTriple(
        rho * (new.dz - old.dz) + prev.dz,
        rho * (new.dv - old.dv) + prev.dv,
        gamma * (new.dx - old.dx) + prev.dx,
    )


def descend(u: JointState, delta: DirectionTriple, R: float) -> JointState:
    """``Proj(u - delta)`` with the projection acting on ``v`` only.

    A non-finite step is returned unprojected so that the caller's
    divergence check, not the projection's input validation, reports it.
    """
    out = JointState(u.z - delta.dz, u.v - delta.dv, u.x - delta.dx)
    if not out.is_finite():
        return out
    return project_state(out, R)


class EpochStep(NamedTuple):
    k: int
    u_before: JointState
    delta: DirectionTriple
    u_after: JointState
    indices: Optional[tuple]


def srba_epoch(problem: BilevelProblem, anchor: JointState, q: int, rho: float, gamma: float,
               R: float, draw: Callable[[int], tuple], ledger: OracleLedger) -> Iterator[EpochStep]:
    """One outer iteration of SRBA as a generator of its ``q`` steps.

    ``draw(k)`` returns the ``(i_idx, j_idx)`` arrays for inner step ``k``;
    injecting it lets verification code replay arbitrary index paths through
    the exact solver arithmetic.
    """
    delta = full_directions(problem, anchor, ledger).scaled(rho, gamma)
    u_prev = anchor
    u = descend(anchor, delta, R)
    yield EpochStep(0, anchor, delta, u, None)
    for k in range(1, q):
        i_idx, j_idx = draw(k)
        new = batch_directions(problem, u, i_idx, j_idx, ledger)
        old = batch_directions(problem, u_prev, i_idx, j_idx, ledger)
        delta = sarah_step(delta, new, old, rho, gamma)
        u_next = descend(u, delta, R)
        yield EpochStep(k, u, delta, u_next, (i_idx, j_idx))
        u_prev, u = u, u_next


class _Recorder:
    """Accumulates trace rows, monitor values and divergence checks."""

    def __init__(self, config: SrbaConfig, ledger: OracleLedger, monitor: Optional[Monitor],
                 expected_rows: int):
        self.config = config
        self.ledger = ledger
        self.monitor = monitor
        self.expected_rows = expected_rows
        self.trace: list = []
        self.index_log: list = []
        self.iterates: Optional[list] = [] if config.record_iterates else None
        self.start = time.perf_counter()

    def record(self, t: int, k: int, u: JointState, indices=None, initial: bool = False):
        row_idx = len(self.trace)
        if not initial:
            self.index_log.append(indices)
        if not u.is_finite() or u.norm() > BLOWUP_NORM:
            result = self.result(u, status="diverged")
            raise DivergenceError(
                f"iterate diverged at t={t}, k={k} (norm {u.norm():.3e})", result=result
            )
        led = self.ledger
        rec = TraceRecord(t, k, led.total, led.grad_F, led.grad1_G, led.hvp11_G, led.jvp21_G)
        last = row_idx == self.expected_rows - 1
        if self.monitor is not None and (row_idx % self.config.monitor_period == 0 or last):
            vals = self.monitor(u)
            rec.h = vals.get("h")
            rec.grad_h_sq = vals.get("grad_h_sq")
            rec.subopt = vals.get("subopt")
        if self.config.timing:
            rec.wall_ms = 1e3 * (time.perf_counter() - self.start)
        self.trace.append(rec)
        if self.iterates is not None:
            self.iterates.append(u.copy())

    def result(self, u: JointState, status: str = "ok") -> SolverRunResult:
        return SolverRunResult(u, self.trace, self.ledger, self.index_log, self.iterates, status)


def initial_state(problem: BilevelProblem, config: SrbaConfig) -> JointState:
    if config.init is None:
        return JointState.zeros(problem)
    u = config.init
    if u.z.shape != (problem.p,) or u.v.shape != (problem.p,) or u.x.shape != (problem.d,):
        raise ConfigurationError("initial state shapes do not match the problem dimensions")
    return JointState(np.array(u.z, dtype=float), np.array(u.v, dtype=float),
                      np.array(u.x, dtype=float))


def srba_run(problem: BilevelProblem, config: SrbaConfig,
             monitor: Optional[Monitor] = None) -> SolverRunResult:
    """Run SRBA for ``T`` outer iterations of length ``q``.

    The trace has ``T * q + 1`` rows: the initial point labelled
    ``(t=0, k=0)``, then one row per update labelled ``(t, k + 1)`` holding
    ``u^{t, k+1}``; the row ``(t, q)`` is the next anchor.

    Oracle accounting per outer iteration: ``m`` grad_F and ``n`` of each
    inner kind for the reset, then two minibatch direction evaluations per
    inner step.
    """
    config.validate()
    R = config.radius(problem)
    ledger = OracleLedger()
    stream = IndexStream(config.seed, problem.n, problem.m, config.batch_size)
    anchor = initial_state(problem, config)
    rec = _Recorder(config, ledger, monitor, config.T * config.q + 1)
    rec.record(0, 0, anchor, initial=True)
    for t in range(config.T):
        draw = lambda k, t=t: stream.draw(t, k)  # noqa: E731
        for step in srba_epoch(problem, anchor, config.q, config.rho, config.gamma, R, draw, ledger):
            rec.record(t, step.k + 1, step.u_after, step.indices)
            anchor = step.u_after
    return rec.result(anchor)
