"""Bilevel update directions and the projection of the linear-system variable.

For a joint state ``u = (z, v, x)``:

    D_z = grad1 G(z, x)
    D_v = hess11 G(z, x) v + grad1 F(z, x)
    D_x = hess21 G(z, x) v + grad2 F(z, x)

At ``z = z*(x)``, ``v = v*(x)`` the first two vanish and ``D_x`` equals the
hypergradient of ``h(x) = F(z*(x), x)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericInputError
from .oracle import BilevelProblem, OracleLedger, batch_query


@dataclass
class JointState:
    z: np.ndarray
    v: np.ndarray
    x: np.ndarray

    def copy(self) -> "JointState":
        return JointState(self.z.copy(), self.v.copy(), self.x.copy())

    def norm(self) -> float:
        return math.sqrt(float(self.z @ self.z + self.v @ self.v + self.x @ self.x))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.z)) and np.all(np.isfinite(self.v))
                    and np.all(np.isfinite(self.x)))

    @classmethod
    def zeros(cls, problem: BilevelProblem) -> "JointState":
        return cls(*problem.zeros())


@dataclass
class DirectionTriple:
    dz: np.ndarray
    dv: np.ndarray
    dx: np.ndarray

    def __add__(self, other):
        return DirectionTriple(self.dz + other.dz, self.dv + other.dv, self.dx + other.dx)

    def __sub__(self, other):
        return DirectionTriple(self.dz - other.dz, self.dv - other.dv, self.dx - other.dx)

    def scaled(self, rho: float, gamma: float) -> "DirectionTriple":
        return DirectionTriple(rho * self.dz, rho * self.dv, gamma * self.dx)

    def copy(self) -> "DirectionTriple":
        return DirectionTriple(self.dz.copy(), self.dv.copy(), self.dx.copy())

    @classmethod
    def zeros_like(cls, u: JointState) -> "DirectionTriple":
        return cls(np.zeros_like(u.z), np.zeros_like(u.v), np.zeros_like(u.x))


def _assemble(out) -> DirectionTriple:
    return DirectionTriple(out.grad1_G, out.hvp + out.grad1_F, out.jvp + out.grad2_F)


def batch_directions(problem: BilevelProblem, u: JointState, i_idx, j_idx,
                     ledger: OracleLedger) -> DirectionTriple:
    """Directions from minibatch means over ``i_idx`` / ``j_idx`` (None = all)."""
    return _assemble(batch_query(problem, i_idx, j_idx, u.z, u.v, u.x, ledger))


def sampled_directions(problem: BilevelProblem, u: JointState, i: int, j: int,
                       ledger: OracleLedger) -> DirectionTriple:
    """Single-sample directions ``D_{., i, j}(u)``."""
    return batch_directions(problem, u, np.array([i]), np.array([j]), ledger)


def full_directions(problem: BilevelProblem, u: JointState, ledger: OracleLedger) -> DirectionTriple:
    return batch_directions(problem, u, None, None, ledger)


def project_v(v: np.ndarray, R: float) -> np.ndarray:
    """Euclidean projection onto the closed ball of radius ``R``.

    ``R = inf`` disables the projection. Points inside the ball are
    returned unchanged (same values, new array).
    """
    if not R > 0:
        raise ValueError("radius must be positive")
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise NumericInputError("non-finite vector passed to project_v")
    if math.isinf(R):
        return v.copy()
    nrm = float(np.linalg.norm(v))
    if nrm <= R:
        return v.copy()
    scale = R / nrm
    out = v * scale
    # rounding can leave ||out|| a few ulps above R; shrink so that a second
    # projection is the identity
    while float(np.linalg.norm(out)) > R:
        scale = np.nextafter(scale, 0.0)
        out = v * scale
    return out


def project_state(u: JointState, R: float) -> JointState:
    """Apply the projection to ``v`` only."""
    return JointState(u.z, project_v(u.v, R), u.x)
