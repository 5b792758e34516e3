"""Finite-sum bilevel problems and the oracle interface.

A bilevel problem is described by ``m`` outer summands ``F_j(z, x)`` and
``n`` inner summands ``G_i(z, x)``; ``z`` lives in R^p and ``x`` in R^d.
Solvers only ever touch a problem through four kinds of queries:

* ``grad_F``   -- both blocks ``(d/dz F_j, d/dx F_j)`` of one outer summand,
* ``grad1_G``  -- ``d/dz G_i``,
* ``hvp11_G``  -- ``d^2/dz^2 G_i @ v``,
* ``jvp21_G``  -- ``d^2/dxdz G_i @ v`` (a vector of R^d).

Indices are 0-based. Every query made through :func:`query_oracle`,
:func:`batch_query` or :func:`full_batch` is recorded in an
:class:`OracleLedger`; problem methods themselves never count.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import NumericInputError, OracleRangeError

ORACLE_KINDS = ("grad_F", "grad1_G", "hvp11_G", "jvp21_G")


@dataclass
class Regularity:
    """Regularity constants of a problem.

    Closed-form problems give exact values; data problems give estimates
    (``exact=False``). ``None`` means unknown / not globally finite.
    """

    mu_G: float
    L0_F: Optional[float] = None
    L1_F: Optional[float] = None
    L2_F: Optional[float] = None
    L1_G: Optional[float] = None
    L2_G: Optional[float] = None
    L3_G: Optional[float] = None
    exact: bool = True

    def __post_init__(self):
        if not self.mu_G > 0:
            raise ValueError("mu_G must be positive")
        for name in ("L0_F", "L1_F", "L2_F", "L1_G", "L2_G", "L3_G"):
            val = getattr(self, name)
            if val is not None and val < 0:
                raise ValueError(f"{name} must be nonnegative")

    def default_radius(self) -> Optional[float]:
        """Radius ``L0_F / mu_G`` bounding ``||v*(x)||``, or None if unknown."""
        if self.L0_F is None or not math.isfinite(self.L0_F):
            return None
        return self.L0_F / self.mu_G


@dataclass
class OracleLedger:
    """Per-kind oracle counters.

    One ledger belongs to one solver run; it is not locked, so concurrent
    runs must each own a ledger.
    """

    grad_F: int = 0
    grad1_G: int = 0
    hvp11_G: int = 0
    jvp21_G: int = 0

    @property
    def total(self) -> int:
        return self.grad_F + self.grad1_G + self.hvp11_G + self.jvp21_G

    @property
    def elements(self) -> int:
        """Count under the 5-tuple convention (a grad_F query yields two
        elements, one per block)."""
        return 2 * self.grad_F + self.grad1_G + self.hvp11_G + self.jvp21_G

    def add(self, grad_F=0, grad1_G=0, hvp11_G=0, jvp21_G=0):
        self.grad_F += grad_F
        self.grad1_G += grad1_G
        self.hvp11_G += hvp11_G
        self.jvp21_G += jvp21_G

    def snapshot(self) -> "OracleLedger":
        return OracleLedger(self.grad_F, self.grad1_G, self.hvp11_G, self.jvp21_G)

    def as_dict(self) -> dict:
        return {
            "grad_F": self.grad_F,
            "grad1_G": self.grad1_G,
            "hvp11_G": self.hvp11_G,
            "jvp21_G": self.jvp21_G,
            "total": self.total,
        }

    def __sub__(self, other: "OracleLedger") -> "OracleLedger":
        return OracleLedger(
            self.grad_F - other.grad_F,
            self.grad1_G - other.grad1_G,
            self.hvp11_G - other.hvp11_G,
            self.jvp21_G - other.jvp21_G,
        )


class OracleOutput(NamedTuple):
    grad1_F: Optional[np.ndarray]
    grad2_F: Optional[np.ndarray]
    grad1_G: Optional[np.ndarray]
    hvp: Optional[np.ndarray]
    jvp: Optional[np.ndarray]


class BilevelProblem(ABC):
    """Abstract finite-sum bilevel problem.

    Subclasses implement the four oracle kinds as *means* over an index
    array (``idx=None`` means all summands). The single-sample oracle is
    the mean over a length-1 index array.
    """

    n: int
    m: int
    p: int
    d: int
    regularity: Regularity

    def _check_dims(self):
        for name in ("n", "m", "p", "d"):
            val = getattr(self, name)
            if int(val) != val or val < 1:
                raise ValueError(f"{name} must be a positive integer, got {val}")

    @abstractmethod
    def grad_F(self, idx, z, x) -> tuple[np.ndarray, np.ndarray]:
        """Mean over ``idx`` of ``(d/dz F_j(z, x), d/dx F_j(z, x))``."""

    @abstractmethod
    def grad1_G(self, idx, z, x) -> np.ndarray: ...

    @abstractmethod
    def hvp11_G(self, idx, z, x, v) -> np.ndarray: ...

    @abstractmethod
    def jvp21_G(self, idx, z, x, v) -> np.ndarray: ...

    @abstractmethod
    def value_F(self, z, x, idx=None) -> float: ...

    @abstractmethod
    def value_G(self, z, x, idx=None) -> float: ...

    def inner_constants(self, x) -> tuple[float, float]:
        """Strong convexity and smoothness of ``G(., x)`` at this ``x``.

        Used by iterative verifiers; the default falls back to the declared
        regularity constants.
        """
        reg = self.regularity
        if reg.L1_G is None:
            raise NotImplementedError("problem does not declare L1_G")
        return reg.mu_G, reg.L1_G

    def zeros(self):
        return np.zeros(self.p), np.zeros(self.p), np.zeros(self.d)


def _check_finite(*arrays):
    for a in arrays:
        if a is not None and not np.all(np.isfinite(a)):
            raise NumericInputError("non-finite entry in oracle input")


def _check_index(idx, size, name):
    arr = np.atleast_1d(np.asarray(idx))
    if arr.size == 0:
        raise OracleRangeError(f"empty {name} index set")
    if not np.issubdtype(arr.dtype, np.integer):
        raise OracleRangeError(f"{name} indices must be integers")
    if arr.min() < 0 or arr.max() >= size:
        raise OracleRangeError(f"{name} index out of range [0, {size})")
    return arr


_ALL = ("grad_F", "grad1_G", "hvp", "jvp")


def batch_query(problem: BilevelProblem, i_idx, j_idx, z, v, x, ledger: OracleLedger,
                kinds: Sequence[str] = _ALL) -> OracleOutput:
    """Mean oracle over the given index arrays; ``None`` means all summands.

    ``kinds`` restricts the evaluated components (any subset of
    ``"grad_F", "grad1_G", "hvp", "jvp"``); only evaluated kinds are
    charged to the ledger, one unit per index.
    """
    _check_finite(z, v, x)
    if i_idx is not None:
        i_idx = _check_index(i_idx, problem.n, "inner")
    if j_idx is not None:
        j_idx = _check_index(j_idx, problem.m, "outer")
    n_i = problem.n if i_idx is None else len(i_idx)
    n_j = problem.m if j_idx is None else len(j_idx)

    g1F = g2F = g1G = hv = jv = None
    if "grad_F" in kinds:
        g1F, g2F = problem.grad_F(j_idx, z, x)
        ledger.grad_F += n_j
    if "grad1_G" in kinds:
        g1G = problem.grad1_G(i_idx, z, x)
        ledger.grad1_G += n_i
    if "hvp" in kinds:
        hv = problem.hvp11_G(i_idx, z, x, v)
        ledger.hvp11_G += n_i
    if "jvp" in kinds:
        jv = problem.jvp21_G(i_idx, z, x, v)
        ledger.jvp21_G += n_i
    return OracleOutput(g1F, g2F, g1G, hv, jv)


def query_oracle(problem: BilevelProblem, i: int, j: int, z, v, x, ledger: OracleLedger,
                 kinds: Sequence[str] = _ALL) -> OracleOutput:
    """Single-sample oracle ``(grad1 F_j, grad2 F_j, grad1 G_i, hvp, jvp)``."""
    for val, size, name in ((i, problem.n, "inner"), (j, problem.m, "outer")):
        if not isinstance(val, (int, np.integer)) or isinstance(val, bool):
            raise OracleRangeError(f"{name} index must be an integer")
        if not 0 <= val < size:
            raise OracleRangeError(f"{name} index {val} out of range [0, {size})")
    return batch_query(problem, np.array([i]), np.array([j]), z, v, x, ledger, kinds)


def full_batch(problem: BilevelProblem, z, v, x, ledger: OracleLedger,
               kinds: Sequence[str] = _ALL) -> OracleOutput:
    """Full-batch means; charges m grad_F and n of each G kind."""
    return batch_query(problem, None, None, z, v, x, ledger, kinds)


# ---------------------------------------------------------------------------
# probes


def strong_convexity_gap(problem: BilevelProblem, rng: np.random.Generator, trials: int = 20,
                         scale: float = 1.0) -> float:
    """Smallest observed ``<g(z1)-g(z2), z1-z2> - mu_G ||z1-z2||^2`` over
    random pairs and every inner summand (negative means violation)."""
    mu = problem.regularity.mu_G
    worst = math.inf
    for _ in range(trials):
        z1 = scale * rng.standard_normal(problem.p)
        z2 = scale * rng.standard_normal(problem.p)
        x = scale * rng.standard_normal(problem.d)
        for i in range(problem.n):
            idx = np.array([i])
            diff = problem.grad1_G(idx, z1, x) - problem.grad1_G(idx, z2, x)
            dz = z1 - z2
            gap = float(diff @ dz - mu * (dz @ dz))
            worst = min(worst, gap / max(dz @ dz, 1e-300))
    return worst


def hvp_linearity_error(problem: BilevelProblem, rng: np.random.Generator, trials: int = 10,
                        scale: float = 1.0) -> float:
    """Max relative deviation of ``hvp(a v1 + v2)`` from ``a hvp(v1) + hvp(v2)``."""
    worst = 0.0
    for _ in range(trials):
        z = scale * rng.standard_normal(problem.p)
        x = scale * rng.standard_normal(problem.d)
        v1 = rng.standard_normal(problem.p)
        v2 = rng.standard_normal(problem.p)
        a = float(rng.standard_normal())
        i = np.array([int(rng.integers(problem.n))])
        lhs = problem.hvp11_G(i, z, x, a * v1 + v2)
        rhs = a * problem.hvp11_G(i, z, x, v1) + problem.hvp11_G(i, z, x, v2)
        denom = max(np.linalg.norm(rhs), np.linalg.norm(lhs), 1e-300)
        worst = max(worst, float(np.linalg.norm(lhs - rhs) / denom))
    return worst
