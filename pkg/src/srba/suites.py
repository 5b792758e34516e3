"""Verification suites behind ``srba-bench verify``.

Each suite is a function returning a list of :class:`Check` results. A
``factory`` hook builds the quadratic instances a suite runs on, which lets
mutation tests swap in a deliberately broken oracle.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

from .directions import JointState, full_directions, project_v
from .errors import ConfigurationError
from .lower_bound import f_nc_value_grad, q_value_grad
from .oracle import BilevelProblem, OracleLedger, hvp_linearity_error, strong_convexity_gap
from .problems import (
    make_blobs,
    make_datacleaning,
    make_hyperparam_problem,
    make_quadratic,
    make_two_class,
)
from .verify import fd_hypergradient, mse_enumerate, solve_inner, solve_linear_system


@dataclass
class Check:
    suite: str
    name: str
    passed: bool
    value: float
    tol: float
    seconds: float = 0.0

    def __post_init__(self):
        # numpy scalars sneak in from comparisons; keep the record JSON-ready
        self.passed = bool(self.passed)
        self.value = float(self.value)
        self.tol = float(self.tol)
        self.seconds = float(self.seconds)


class PerturbedHvp(BilevelProblem):
    """Wraps a problem and adds ``eps * v`` to every Hessian-vector product."""

    def __init__(self, base: BilevelProblem, eps: float = 1e-3):
        self.base = base
        self.eps = eps
        self.n, self.m, self.p, self.d = base.n, base.m, base.p, base.d
        self.regularity = base.regularity

    def grad_F(self, idx, z, x):
        return self.base.grad_F(idx, z, x)

    def grad1_G(self, idx, z, x):
        return self.base.grad1_G(idx, z, x)

    def hvp11_G(self, idx, z, x, v):
        return self.base.hvp11_G(idx, z, x, v) + self.eps * v

    def jvp21_G(self, idx, z, x, v):
        return self.base.jvp21_G(idx, z, x, v)

    def value_F(self, z, x, idx=None):
        return self.base.value_F(z, x, idx)

    def value_G(self, z, x, idx=None):
        return self.base.value_G(z, x, idx)

    def inner_constants(self, x):
        return self.base.inner_constants(x)

    def __getattr__(self, name):
        # closed-form accessors (z_star, grad_h, ...) come from the base
        if name == "base":
            raise AttributeError(name)
        return getattr(self.base, name)


Factory = Callable[..., BilevelProblem]


def _quadratic_factory(seed, p, d, n, m):
    return make_quadratic(seed, p, d, n, m)


def _timed(suite, name, fn, tol):
    t0 = time.perf_counter()
    value = float(fn())
    ok = bool(value <= tol) and math.isfinite(value)
    return Check(suite, name, ok, value, tol, time.perf_counter() - t0)


def suite_oracle(factory: Factory = _quadratic_factory) -> list:
    rng = np.random.default_rng(0)
    tr, w = make_two_class(0, 64, n_features=6)
    va, _ = make_two_class(1, 64, n_features=6, w_true=w)
    btr, centers = make_blobs(0, 60, n_features=4)
    bva, _ = make_blobs(1, 30, n_features=4, centers=centers)
    problems = {
        "quadratic": factory(0, 6, 4, 5, 3),
        "hyperparam": make_hyperparam_problem(tr, va),
        "datacleaning": make_datacleaning(btr, bva, p_c=0.3, seed=0)[0],
    }
    out = []
    for label, prob in problems.items():
        out.append(_timed("oracle", f"{label}: strong convexity deficit",
                          lambda: max(0.0, -strong_convexity_gap(prob, rng, trials=5)), 1e-10))
        out.append(_timed("oracle", f"{label}: hvp linearity",
                          lambda: hvp_linearity_error(prob, rng), 1e-10))
    return out


def suite_hypergradient(factory: Factory = _quadratic_factory) -> list:
    def exact_err():
        worst = 0.0
        for seed in range(5):
            prob = factory(seed, 8, 6, 4, 5)
            x = np.random.default_rng(seed).standard_normal(prob.d)
            # v comes from CG on the hvp oracle, the reference from the
            # assembled quadratic form of h
            z = prob.z_star(x)
            v = solve_linear_system(prob, x, z, tol=1e-13)
            dx = full_directions(prob, JointState(z, v, x), OracleLedger()).dx
            H, b = prob.h_quadratic_form()
            g = H @ x + b
            worst = max(worst, np.linalg.norm(dx - g) / (1 + np.linalg.norm(g)))
        return worst

    def fd_err():
        worst = 0.0
        for seed in range(5):
            prob = factory(seed, 8, 6, 4, 5)
            x = np.random.default_rng(seed).standard_normal(prob.d)
            z = solve_inner(prob, x)
            v = solve_linear_system(prob, x, z)
            dx = full_directions(prob, JointState(z, v, x), OracleLedger()).dx
            fd = fd_hypergradient(prob, x)
            worst = max(worst, np.linalg.norm(dx - fd) / (1 + np.linalg.norm(fd)))
        return worst

    return [
        _timed("hypergradient", "D_x at (z*, v*) vs closed form", exact_err, 1e-10),
        _timed("hypergradient", "D_x vs central differences", fd_err, 1e-5),
    ]


def suite_mse(factory: Factory = _quadratic_factory) -> list:
    out = []
    for seed in range(2):
        prob = factory(seed, 4, 3, 2, 2)
        rng = np.random.default_rng(seed)
        u0 = JointState(rng.standard_normal(prob.p), rng.standard_normal(prob.p),
                        rng.standard_normal(prob.d))
        rep = mse_enumerate(prob, u0, q=3, rho=0.2, gamma=0.3)
        for name in ("z", "v", "x"):
            gap = max(abs(r["lhs"] - r["rhs"]) for r in rep[name])
            out.append(Check("mse", f"seed {seed}: D_{name} identity", gap <= 1e-10, gap, 1e-10))
    return out


def suite_projection(factory: Factory = _quadratic_factory) -> list:
    rng = np.random.default_rng(0)
    idem = 0.0
    expand = -math.inf
    for R in (0.1, 1.0, 10.0):
        for _ in range(1000):
            v1 = rng.standard_normal(7) * rng.choice([0.01, 1.0, 100.0])
            v2 = rng.standard_normal(7) * rng.choice([0.01, 1.0, 100.0])
            p1, p2 = project_v(v1, R), project_v(v2, R)
            if not np.array_equal(project_v(p1, R), p1):
                idem = max(idem, float(np.abs(project_v(p1, R) - p1).max()))
            expand = max(expand, np.linalg.norm(p1 - p2) - np.linalg.norm(v1 - v2))
    return [
        Check("projection", "idempotence (exact)", idem == 0.0, idem, 0.0),
        Check("projection", "nonexpansive excess", expand <= 1e-12, float(expand), 1e-12),
    ]


def suite_zerochain(factory: Factory = _quadratic_factory) -> list:
    rng = np.random.default_rng(0)
    d = 32
    leaks = 0.0
    for k in (0, 1, d // 2, d - 1):
        for _ in range(20):
            x = np.zeros(d + 1)
            x[:k] = rng.standard_normal(k)
            _, g = f_nc_value_grad(x, 0.3, d)
            _, gq = q_value_grad(x, math.sqrt(0.3))
            leaks = max(leaks, float(np.abs(g[k + 1:]).max(initial=0.0)),
                        float(np.abs(gq[k + 1:]).max(initial=0.0)))
    return [Check("zerochain", "gradient mass beyond coordinate k+1", leaks == 0.0, leaks, 0.0)]


SUITES = {
    "oracle": suite_oracle,
    "hypergradient": suite_hypergradient,
    "mse": suite_mse,
    "projection": suite_projection,
    "zerochain": suite_zerochain,
}


def run_suites(filter: Optional[str] = None, factory: Factory = _quadratic_factory) -> list:
    """Run every suite whose name contains ``filter``; an empty selection
    is a configuration error rather than a vacuous pass."""
    names = [s for s in SUITES if filter is None or filter in s]
    if not names:
        raise ConfigurationError(f"no verification suite matches {filter!r} (have {sorted(SUITES)})")
    checks = []
    for s in names:
        checks.extend(SUITES[s](factory))
    return checks


def format_table(checks: list) -> str:
    width = max(len(f"{c.suite}/{c.name}") for c in checks)
    lines = []
    for c in checks:
        tag = "PASS" if c.passed else "FAIL"
        lines.append(f"{tag}  {c.suite + '/' + c.name:<{width}}  value={c.value:.3e}  tol={c.tol:.1e}")
    n_fail = sum(not c.passed for c in checks)
    lines.append(f"{len(checks) - n_fail}/{len(checks)} checks passed")
    return "\n".join(lines)


def checks_to_json(checks: list) -> str:
    return json.dumps([asdict(c) for c in checks], indent=2)
