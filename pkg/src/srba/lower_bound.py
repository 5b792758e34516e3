"""Worst-case bilevel instance and zero-chain certificates.

The instance embeds ``m`` copies of the chain function

    f_nc(y; alpha, T) = Q(y; sqrt(alpha), T + 1) + alpha * Gamma(y; T)

into mutually orthogonal blocks ``U^(j)`` of a random orthogonal matrix and
pairs them with the inner function ``G_i(z, x) = mu_G/2 ||z - x||^2`` (so
``z*(x) = x``). A solver whose iterates stay in the span of its oracle
outputs uncovers at most one chain coordinate per block per query, which
keeps the hypergradient large for many iterations.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import ortho_group

from .errors import DimensionMismatchError, PreconditionError
from .oracle import BilevelProblem, Regularity

GAMMA_SCALE = 120.0
ZERO_TOL = 1e-9


# ---------------------------------------------------------------------------
# chain components


def q_value_grad(x, xi):
    """``xi/2 (x_1 - 1)^2 + 1/2 sum_k (x_{k+1} - x_k)^2`` and its gradient."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size < 2:
        raise PreconditionError("Q needs a vector of dimension >= 2")
    diff = x[1:] - x[:-1]
    value = 0.5 * xi * (x[0] - 1.0) ** 2 + 0.5 * float(diff @ diff)
    grad = np.zeros_like(x)
    grad[:-1] -= diff
    grad[1:] += diff
    grad[0] += xi * (x[0] - 1.0)
    return value, grad


def gamma_antiderivative(t):
    """Antiderivative of ``t^2 (t - 1) / (1 + t^2)``."""
    t = np.asarray(t, dtype=float)
    return 0.5 * t * t - 0.5 * np.log1p(t * t) - t + np.arctan(t)


def gamma_derivative(t):
    """``120 t^2 (t - 1) / (1 + t^2)``; vanishes at 0 and 1."""
    t = np.asarray(t, dtype=float)
    return GAMMA_SCALE * t * t * (t - 1.0) / (1.0 + t * t)


def gamma_second_derivative(t):
    t = np.asarray(t, dtype=float)
    return GAMMA_SCALE * (t ** 4 + 3 * t * t - 2 * t) / (1.0 + t * t) ** 2


def gamma_value_grad(x, d):
    """``Gamma(x; d) = 120 sum_{k<=d} int_1^{x_k} t^2(t-1)/(1+t^2) dt``.

    Only the first ``d`` coordinates enter; the gradient is zero beyond them.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size < d:
        raise DimensionMismatchError(f"Gamma(.; {d}) needs at least {d} coordinates")
    head = x[:d]
    value = GAMMA_SCALE * float(np.sum(gamma_antiderivative(head) - gamma_antiderivative(1.0)))
    grad = np.zeros_like(x)
    grad[:d] = gamma_derivative(head)
    return value, grad


def f_nc_value_grad(x, alpha, d):
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size != d + 1:
        raise DimensionMismatchError(f"f_nc(.; alpha, {d}) takes vectors of length {d + 1}")
    if not 0 < alpha <= 1:
        raise PreconditionError("alpha must lie in (0, 1]")
    qv, qg = q_value_grad(x, math.sqrt(alpha))
    gv, gg = gamma_value_grad(x, d)
    # "+ 0.0" turns any -0.0 into +0.0 so zero tails are bitwise zero
    return qv + alpha * gv, (qg + alpha * gg) + 0.0


def f_nc_hessian(x, alpha, d):
    x = np.asarray(x, dtype=float)
    dim = d + 1
    H = np.zeros((dim, dim))
    idx = np.arange(dim - 1)
    H[idx, idx] += 1.0
    H[idx + 1, idx + 1] += 1.0
    H[idx, idx + 1] -= 1.0
    H[idx + 1, idx] -= 1.0
    H[0, 0] += math.sqrt(alpha)
    H[np.arange(d), np.arange(d)] += alpha * gamma_second_derivative(x[:d])
    return H


@functools.lru_cache(maxsize=None)
def estimate_gamma_smoothness(lo=-10.0, hi=10.0, points=2_000_001) -> float:
    """Bound on ``|Gamma''|`` from a fine grid plus the asymptote ``120``."""
    t = np.linspace(lo, hi, points)
    return float(max(np.abs(gamma_second_derivative(t)).max(), GAMMA_SCALE))


# ---------------------------------------------------------------------------
# instance


@dataclass
class WorstCaseInstance:
    m: int
    n: int
    T: int
    alpha: float
    lambda_F: float
    beta: float
    lambda_G: float
    mu_G: float
    L1_F: float
    epsilon: float
    Delta: float
    c_gamma: float
    U: np.ndarray = field(repr=False)
    problem: "WorstCaseProblem" = field(repr=False, default=None)

    def block(self, j) -> np.ndarray:
        return self.U[j * (self.T + 1):(j + 1) * (self.T + 1)]

    @property
    def dim(self) -> int:
        return (self.T + 1) * self.m

    def grad_scale(self) -> float:
        """``lambda_F / beta``: chain-rule factor between f_nc and F_j."""
        return self.lambda_F / self.beta

    def gradient_floor(self, n_stuck: int) -> float:
        """Lower bound on ``||grad h||^2`` when ``n_stuck`` blocks have both
        trailing chain coordinates at zero."""
        return self.grad_scale() ** 2 * self.alpha ** 1.5 * n_stuck / (16 * self.m ** 2)

    def iteration_floor(self) -> float:
        return self.m * self.T / 2

    def summary(self) -> dict:
        keys = ("m", "n", "T", "alpha", "lambda_F", "beta", "lambda_G", "mu_G", "L1_F",
                "epsilon", "Delta", "c_gamma")
        return {k: getattr(self, k) for k in keys}


class WorstCaseProblem(BilevelProblem):
    """``F_j(z, x) = lambda_F f_nc(U^(j) z / beta)``, ``G_i = lambda_G/2 ||(z-x)/beta||^2``."""

    def __init__(self, inst: WorstCaseInstance):
        self.inst = inst
        self.n, self.m = inst.n, inst.m
        self.p = self.d = inst.dim
        self._check_dims()
        self._blocks = inst.U.reshape(inst.m, inst.T + 1, inst.dim)
        self._curv = inst.lambda_G / inst.beta ** 2
        self.regularity = Regularity(mu_G=self._curv, L0_F=None, L1_F=inst.L1_F,
                                     L1_G=self._curv, L2_G=0.0, L3_G=0.0, exact=False)

    def _js(self, idx):
        return range(self.m) if idx is None else np.asarray(idx)

    def grad_F(self, idx, z, x):
        inst = self.inst
        g = np.zeros(self.p)
        js = self._js(idx)
        for j in js:
            Uj = self._blocks[j]
            _, gj = f_nc_value_grad(Uj @ z / inst.beta, inst.alpha, inst.T)
            g += Uj.T @ gj
        g *= inst.lambda_F / inst.beta / len(js)
        return g, np.zeros(self.d)

    def grad1_G(self, idx, z, x):
        return self._curv * (z - x)

    def hvp11_G(self, idx, z, x, v):
        return self._curv * v

    def jvp21_G(self, idx, z, x, v):
        return -self._curv * v

    def value_F(self, z, x, idx=None):
        inst = self.inst
        js = self._js(idx)
        vals = [f_nc_value_grad(self._blocks[j] @ z / inst.beta, inst.alpha, inst.T)[0] for j in js]
        return inst.lambda_F * float(np.mean(vals))

    def value_G(self, z, x, idx=None):
        r = z - x
        return 0.5 * self._curv * float(r @ r)

    def inner_constants(self, x):
        return self._curv, self._curv

    def h(self, x):
        return self.value_F(x, x)

    def grad_h(self, x):
        # z*(x) = x, v* = -grad1 F / curv, hess21 G = -curv I  =>  grad h = grad1 F(x, x)
        g1, g2 = self.grad_F(None, x, x)
        return g2 + g1


def make_worstcase(m, n, epsilon, Delta, L1_F=1.0, mu_G=1.0, seed=0, c_gamma=None) -> WorstCaseInstance:
    """Build the instance from the target accuracy and initial gap.

    ``alpha = min(1, m / c)``, ``lambda_F = 160 m eps / (L1_F alpha^1.5)``,
    ``beta = sqrt(5 lambda_F / L1_F)``, ``lambda_G = beta^2 mu_G`` and
    ``T = ceil(Delta L1_F sqrt(alpha) / (1760 m eps))``.
    """
    for name, val in (("m", m), ("n", n)):
        if int(val) != val or val < 1:
            raise PreconditionError(f"{name} must be a positive integer")
    for name, val in (("epsilon", epsilon), ("Delta", Delta), ("L1_F", L1_F), ("mu_G", mu_G)):
        if not (val > 0 and math.isfinite(val)):
            raise PreconditionError(f"{name} must be positive and finite")
    c = estimate_gamma_smoothness() if c_gamma is None else float(c_gamma)
    alpha = min(1.0, m / c)
    bound = Delta * L1_F * alpha / (1760 * m)
    if epsilon > bound * (1 + 1e-12):
        raise PreconditionError(
            f"inadmissible epsilon={epsilon:.6g}: need epsilon <= Delta*L1_F*alpha/(1760*m) = {bound:.6g}"
        )
    lambda_F = 160 * m * epsilon / (L1_F * alpha ** 1.5)
    beta = math.sqrt(5 * lambda_F / L1_F)
    lambda_G = beta ** 2 * mu_G
    T_real = Delta * L1_F * math.sqrt(alpha) / (1760 * m * epsilon)
    T = max(1, math.ceil(T_real - 1e-9))
    dim = (T + 1) * m
    rng = np.random.default_rng(seed)
    U = ortho_group.rvs(dim, random_state=rng) if dim > 1 else np.ones((1, 1))
    inst = WorstCaseInstance(m=int(m), n=int(n), T=T, alpha=alpha, lambda_F=lambda_F, beta=beta,
                             lambda_G=lambda_G, mu_G=mu_G, L1_F=L1_F, epsilon=epsilon,
                             Delta=Delta, c_gamma=c, U=U)
    inst.problem = WorstCaseProblem(inst)
    return inst


def delta_for_chain(m, T, epsilon, L1_F=1.0, c_gamma=None) -> float:
    """Initial gap ``Delta`` for which the chain-length formula gives ``T``."""
    c = estimate_gamma_smoothness() if c_gamma is None else float(c_gamma)
    alpha = min(1.0, m / c)
    return 1760 * m * epsilon * T / (L1_F * math.sqrt(alpha))


def make_worstcase_for_chain(m, n, T, epsilon, L1_F=1.0, mu_G=1.0, seed=0, c_gamma=None):
    Delta = delta_for_chain(m, T, epsilon, L1_F, c_gamma)
    return make_worstcase(m, n, epsilon, Delta, L1_F, mu_G, seed, c_gamma)


def outer_smoothness_estimate(inst: WorstCaseInstance, rng, samples=200, scale=2.0) -> float:
    """Largest ``||hess F_j||`` over random chain points plus ``y = -1``
    (where ``|Gamma''|`` peaks). Every ``F_j`` has the same Hessian spectrum
    at matching chain points, so sampling in chain coordinates suffices."""
    factor = inst.lambda_F / inst.beta ** 2
    pts = [scale * rng.standard_normal(inst.T + 1) for _ in range(samples)]
    pts.append(-np.ones(inst.T + 1))
    worst = 0.0
    for y in pts:
        eig = np.linalg.eigvalsh(f_nc_hessian(y, inst.alpha, inst.T))
        worst = max(worst, float(np.abs(eig).max()))
    return factor * worst


def initial_gap(inst: WorstCaseInstance, iters=20000) -> dict:
    """``h(0)`` against the infimum.

    ``f_nc >= 0`` with equality at the all-ones vector, so ``inf h = 0``;
    a long gradient run on ``h`` is reported as an independent upper bound
    on the infimum.
    """
    prob = inst.problem
    x0 = np.zeros(inst.dim)
    h0 = prob.h(x0)
    L = inst.L1_F * (4 + inst.alpha * inst.c_gamma) / 5
    x = x0.copy()
    best = h0
    for _ in range(iters):
        x = x - prob.grad_h(x) / L
        best = min(best, prob.h(x))
    return {"h0": h0, "inf_h": 0.0, "h_long_run": best, "gap": h0, "Delta": inst.Delta}


# ---------------------------------------------------------------------------
# certificates


@dataclass
class CertificateRow:
    t: int
    outer_t: int
    k: int
    grad_h_sq: float
    floor: float
    span_residual: float
    I_size: int


@dataclass
class Certificate:
    instance: dict
    rows: list
    iteration_floor: float
    first_eps_hit: Optional[int]
    span_ok: bool
    floor_ok: bool
    eps_ok: bool
    covers_floor: bool
    span_tol: float
    floor_tol: float

    @property
    def passed(self) -> bool:
        return self.span_ok and self.floor_ok and self.eps_ok and self.covers_floor

    def to_json(self) -> str:
        d = asdict(self)
        d["passed"] = self.passed
        return json.dumps(d, indent=2)


def revealed_counts(inst: WorstCaseInstance, index_log) -> np.ndarray:
    """Chain coordinates per block that the query history can have uncovered
    before each recorded iterate (row 0 is the start, all zeros).

    A step querying block ``j`` (all blocks for a full batch) adds one.
    """
    counts = np.zeros((len(index_log) + 1, inst.m), dtype=int)
    cur = np.zeros(inst.m, dtype=int)
    for s, entry in enumerate(index_log, start=1):
        if entry is None:
            cur = cur + 1
        else:
            js = np.unique(np.asarray(entry[1]))
            cur[js] += 1
        cur = np.minimum(cur, inst.T + 1)
        counts[s] = cur
    return counts


def certify_run(inst: WorstCaseInstance, result, span_tol=1e-8, floor_tol=1e-9,
                zero_tol=ZERO_TOL) -> Certificate:
    """Check a solver run (started at zero, iterates recorded) against the
    span recursion, the gradient floor and the iteration floor."""
    if result.iterates is None:
        raise ValueError("run must be recorded with record_iterates=True")
    if len(result.iterates) != len(result.trace) or len(result.index_log) != len(result.trace) - 1:
        raise ValueError("trace, iterates and index log lengths disagree")
    if result.iterates[0].x.shape != (inst.dim,):
        raise DimensionMismatchError("run dimension does not match the instance")
    if np.any(result.iterates[0].x != 0) or np.any(result.iterates[0].z != 0) \
            or np.any(result.iterates[0].v != 0):
        raise PreconditionError("certificate requires a run started at z = v = x = 0")
    prob = inst.problem
    counts = revealed_counts(inst, result.index_log)
    blocks = inst.U.reshape(inst.m, inst.T + 1, inst.dim)
    rows = []
    first_hit = None
    eps_ok = span_ok = floor_ok = True
    limit = inst.iteration_floor()
    for s, (u, rec) in enumerate(zip(result.iterates, result.trace)):
        x = u.x
        basis = np.concatenate([blocks[j, :counts[s, j]] for j in range(inst.m)], axis=0)
        resid = x - basis.T @ (basis @ x) if basis.size else x
        span_res = float(np.linalg.norm(resid))
        ys = blocks @ x / inst.beta
        stuck = int(np.sum((np.abs(ys[:, inst.T - 1]) <= zero_tol) & (np.abs(ys[:, inst.T]) <= zero_tol)))
        g = prob.grad_h(x)
        gsq = float(g @ g)
        floor = inst.gradient_floor(stuck)
        rows.append(CertificateRow(s, rec.t, rec.k, gsq, floor, span_res, stuck))
        span_ok &= span_res <= span_tol
        floor_ok &= gsq >= floor - floor_tol
        if s <= limit:
            eps_ok &= gsq > inst.epsilon
        if first_hit is None and gsq <= inst.epsilon:
            first_hit = s
    return Certificate(instance=inst.summary(), rows=rows, iteration_floor=limit,
                       first_eps_hit=first_hit, span_ok=bool(span_ok), floor_ok=bool(floor_ok),
                       eps_ok=bool(eps_ok), covers_floor=len(rows) - 1 >= limit,
                       span_tol=span_tol, floor_tol=floor_tol)
