"""Independent reference computations for bilevel problems.

Nothing here shares arithmetic with the solvers except :func:`mse_enumerate`,
which deliberately replays the solver's own epoch code along every index
path so that the real implementation is what gets checked.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from .directions import JointState, full_directions
from .errors import EnumerationTooLargeError, NonConvergenceError, PreconditionError
from .oracle import BilevelProblem, OracleLedger
from .problems.quadratic import QuadraticBilevel
from .solver import srba_epoch


def solve_inner(problem: BilevelProblem, x, tol=1e-12, z0=None, max_iter=200_000,
                agd_iter=5_000, newton_iter=100):
    """Point ``z`` with ``||grad1 G(z, x)|| <= tol``.

    Quadratic instances use a direct solve; everything else runs Nesterov's
    constant-momentum method for strongly convex objectives, with gradient
    restarts, using the ``(mu, L)`` pair from ``problem.inner_constants``,
    and then polishes with damped Newton steps whose systems are solved by
    conjugate gradients on Hessian-vector products.
    """
    if tol <= 0:
        raise PreconditionError("tol must be positive")
    x = np.asarray(x, dtype=float)
    if isinstance(problem, QuadraticBilevel):
        z = np.linalg.solve(problem.Abar, problem.Bbar @ x)
        res = float(np.linalg.norm(problem.grad1_G(None, z, x)))
        if res > tol:
            # one refinement step absorbs the conditioning loss of the solve
            z = z - np.linalg.solve(problem.Abar, problem.grad1_G(None, z, x))
            res = float(np.linalg.norm(problem.grad1_G(None, z, x)))
            if res > tol:
                raise NonConvergenceError(f"direct solve residual {res:.3e} > {tol:.1e}", res)
        return z
    mu, L = problem.inner_constants(x)
    step = 1.0 / L
    mom = (math.sqrt(L) - math.sqrt(mu)) / (math.sqrt(L) + math.sqrt(mu))
    z = np.zeros(problem.p) if z0 is None else np.array(z0, dtype=float)
    y = z.copy()
    g = problem.grad1_G(None, z, x)
    res = float(np.linalg.norm(g))
    # the accelerated phase does the bulk when the problem is well
    # conditioned; damped Newton steps (CG on the hvp) finish the job and
    # take over when a tiny mu makes the linear rate crawl
    coarse = max(tol, 1e-6)
    for _ in range(min(max_iter, agd_iter)):
        if res <= coarse:
            break
        gy = problem.grad1_G(None, y, x)
        z_new = y - step * gy
        if (gy @ (z_new - z)) > 0:  # restart: momentum points uphill
            y = z.copy()
            continue
        y = z_new + mom * (z_new - z)
        z = z_new
        g = problem.grad1_G(None, z, x)
        res = float(np.linalg.norm(g))
    for _ in range(newton_iter):
        if res <= tol:
            return z
        dz = _cg(lambda w: problem.hvp11_G(None, z, x, w), -g, 1e-2 * min(res, 1.0) * res,
                 20 * problem.p + 100)
        # Armijo backtracking on G; near the solution the full step is taken
        # even when G cannot resolve the decrease in floating point
        f0 = problem.value_G(z, x)
        slope = float(g @ dz)
        t = 1.0
        while res > 1e-6 and t > 1e-10:
            if problem.value_G(z + t * dz, x) <= f0 + 1e-4 * t * slope:
                break
            t *= 0.5
        z_new = z + t * dz
        g_new = problem.grad1_G(None, z_new, x)
        res_new = float(np.linalg.norm(g_new))
        if res <= 1e-6 and not res_new < res:
            break
        z, g, res = z_new, g_new, res_new
    if res <= tol:
        return z
    raise NonConvergenceError(f"inner solve stalled at residual {res:.3e} (tol {tol:.1e})", res)


def _cg(matvec, b, tol, cap):
    """Plain conjugate gradients for ``matvec(v) = b``; returns the last iterate."""
    v = np.zeros_like(b)
    r = b.copy()
    d = r.copy()
    rr = float(r @ r)
    for _ in range(cap):
        if math.sqrt(rr) <= tol:
            break
        Ad = matvec(d)
        a = rr / float(d @ Ad)
        v = v + a * d
        r = r - a * Ad
        rr_new = float(r @ r)
        d = r + (rr_new / rr) * d
        rr = rr_new
    return v


def solve_linear_system(problem: BilevelProblem, x, z, tol=1e-12, max_iter=None):
    """``v`` with ``||hess11 G(z, x) v + grad1 F(z, x)|| <= tol`` by conjugate
    gradients on Hessian-vector products."""
    if tol <= 0:
        raise PreconditionError("tol must be positive")
    b = -problem.grad_F(None, z, x)[0]
    hvp = lambda w: problem.hvp11_G(None, z, x, w)  # noqa: E731
    v = np.zeros(problem.p)
    r = b.copy()
    if np.linalg.norm(r) <= tol:
        return v
    d = r.copy()
    rr = float(r @ r)
    cap = max_iter or 20 * problem.p + 100
    for _ in range(cap):
        Hd = hvp(d)
        a = rr / float(d @ Hd)
        v = v + a * d
        r = r - a * Hd
        rr_new = float(r @ r)
        if math.sqrt(rr_new) <= tol:
            # recompute the true residual; recursion drift can hide error
            true_r = b - hvp(v)
            if np.linalg.norm(true_r) <= tol:
                return v
            r = true_r
            rr_new = float(r @ r)
            d = r.copy()
            rr = rr_new
            continue
        d = r + (rr_new / rr) * d
        rr = rr_new
    res = float(np.linalg.norm(b - hvp(v)))
    if res <= tol:
        return v
    raise NonConvergenceError(f"CG stalled at residual {res:.3e} (tol {tol:.1e})", res)


def value_h(problem: BilevelProblem, x, inner_tol=1e-12, z0=None):
    """``(h(x), z*(x))`` using an accurate inner solve."""
    z = solve_inner(problem, x, inner_tol, z0=z0)
    return problem.value_F(z, x), z


def implicit_hypergradient(problem: BilevelProblem, x, tol=1e-12, z0=None):
    """``grad2 F + hess21 G v*`` with ``z*`` and ``v*`` solved to ``tol``."""
    z = solve_inner(problem, x, tol, z0=z0)
    v = solve_linear_system(problem, x, z, tol)
    return problem.jvp21_G(None, z, x, v) + problem.grad_F(None, z, x)[1]


def fd_hypergradient(problem: BilevelProblem, x, h_step=1e-4, inner_tol=1e-12):
    """Central differences of ``h`` along every coordinate."""
    if h_step <= 0:
        raise PreconditionError("h_step must be positive")
    x = np.asarray(x, dtype=float)
    z_c = solve_inner(problem, x, inner_tol)
    out = np.empty(problem.d)
    for k in range(problem.d):
        e = np.zeros(problem.d)
        e[k] = h_step
        hp, _ = value_h(problem, x + e, inner_tol, z0=z_c)
        hm, _ = value_h(problem, x - e, inner_tol, z0=z_c)
        out[k] = (hp - hm) / (2 * h_step)
    return out


# ---------------------------------------------------------------------------
# exhaustive mean-squared-error check


def mse_enumerate(problem: BilevelProblem, u0: JointState, q: int, rho: float, gamma: float,
                  max_paths: int = 10_000) -> dict:
    """Exact expectations over every single-sample index path of one epoch.

    For each direction and each inner step ``k`` returns ``lhs`` =
    E||D^k - D(u^k)||^2 and ``rhs`` = sum_r E||D^r - D^{r-1}||^2 -
    sum_r E||D(u^r) - D(u^{r-1})||^2. The projection is disabled.
    """
    n_pairs = problem.n * problem.m
    n_paths = n_pairs ** (q - 1)
    if n_paths > max_paths:
        raise EnumerationTooLargeError(
            f"(n*m)^(q-1) = {n_paths} index paths exceeds the limit {max_paths}"
        )
    scratch = OracleLedger()
    names = ("z", "v", "x")
    err = np.zeros((3, q))
    est_step = np.zeros((3, q))
    full_step = np.zeros((3, q))
    for path in itertools.product(range(n_pairs), repeat=q - 1):
        def draw(k, path=path):
            e = path[k - 1]
            return np.array([e // problem.m]), np.array([e % problem.m])

        prev_est = prev_full = None
        for step in srba_epoch(problem, u0, q, rho, gamma, math.inf, draw, scratch):
            full = full_directions(problem, step.u_before, scratch)
            full_t = (full.dz, full.dv, full.dx)
            est_t = (step.delta.dz / rho, step.delta.dv / rho, step.delta.dx / gamma)
            for a in range(3):
                err[a, step.k] += float(np.sum((est_t[a] - full_t[a]) ** 2))
                if step.k > 0:
                    est_step[a, step.k] += float(np.sum((est_t[a] - prev_est[a]) ** 2))
                    full_step[a, step.k] += float(np.sum((full_t[a] - prev_full[a]) ** 2))
            prev_est, prev_full = est_t, full_t
    err /= n_paths
    est_step /= n_paths
    full_step /= n_paths
    report = {}
    for a, name in enumerate(names):
        rows = []
        for k in range(q):
            rhs = float(est_step[a, 1:k + 1].sum() - full_step[a, 1:k + 1].sum())
            rows.append({"k": k, "lhs": float(err[a, k]), "rhs": rhs})
        report[name] = rows
    return report
