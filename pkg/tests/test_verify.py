import json
import math

import numpy as np
import pytest

from srba import OracleLedger
from srba.directions import JointState, full_directions
from srba.errors import (
    ConfigurationError,
    EnumerationTooLargeError,
    NonConvergenceError,
    PreconditionError,
)
from srba.problems import make_blobs, make_datacleaning, make_hyperparam_problem, make_quadratic
from srba.problems import make_two_class, trivial_problem
from srba.suites import PerturbedHvp, checks_to_json, format_table, run_suites
from srba.verify import (
    fd_hypergradient,
    implicit_hypergradient,
    mse_enumerate,
    solve_inner,
    solve_linear_system,
)


def hyperparam(seed=0):
    tr, w = make_two_class(seed, 40, n_features=5, n_informative=5)
    va, _ = make_two_class(seed + 1, 30, n_features=5, w_true=w)
    return make_hyperparam_problem(tr, va)


def test_solve_inner_trivial_is_exact():
    x = np.array([0.3, -1.7])
    np.testing.assert_array_equal(solve_inner(trivial_problem(), x), x)


def test_solve_inner_quadratic_matches_direct_solve():
    prob = make_quadratic(0, 8, 5, 6, 4)
    x = np.random.default_rng(0).standard_normal(5)
    z = solve_inner(prob, x, tol=1e-12)
    ref = np.linalg.solve(prob.A.mean(axis=0), prob.B.mean(axis=0) @ x)
    assert np.linalg.norm(z - ref) <= 1e-11
    assert np.linalg.norm(prob.grad1_G(None, z, x)) <= 1e-12


@pytest.mark.parametrize("lam", [-3.0, 0.0, 2.0])
def test_solve_inner_logistic_postcondition(lam):
    prob = hyperparam()
    x = np.full(prob.d, lam)
    z = solve_inner(prob, x, tol=1e-10)
    assert np.linalg.norm(prob.grad1_G(None, z, x)) <= 1e-10


def test_solve_inner_ill_conditioned():
    prob = hyperparam(3)
    x = np.array([-9.0, -9.0, 0.0, 3.0, -9.0])
    z = solve_inner(prob, x, tol=1e-10)
    assert np.linalg.norm(prob.grad1_G(None, z, x)) <= 1e-10


def test_solve_inner_datacleaning():
    tr, c = make_blobs(0, 60, n_features=4)
    va, _ = make_blobs(1, 30, n_features=4, centers=c)
    prob, _ = make_datacleaning(tr, va, 0.3)
    x = np.random.default_rng(0).standard_normal(prob.d)
    z = solve_inner(prob, x, tol=1e-10)
    assert np.linalg.norm(prob.grad1_G(None, z, x)) <= 1e-10


def test_solve_inner_errors():
    with pytest.raises(PreconditionError):
        solve_inner(trivial_problem(), np.zeros(2), tol=0.0)
    prob = hyperparam()
    with pytest.raises(NonConvergenceError) as exc:
        solve_inner(prob, np.zeros(prob.d), tol=1e-14, max_iter=2, agd_iter=2, newton_iter=0)
    assert exc.value.residual > 1e-14


def test_solve_linear_system_trivial_and_quadratic():
    z = np.array([2.0, -1.0])
    np.testing.assert_allclose(solve_linear_system(trivial_problem(), np.zeros(2), z), -z,
                               atol=1e-15)
    prob = make_quadratic(1, 7, 3, 4, 5)
    x = np.random.default_rng(1).standard_normal(3)
    zs = prob.z_star(x)
    v = solve_linear_system(prob, x, zs, tol=1e-12)
    Abar = prob.A.mean(axis=0)
    ref = -np.linalg.solve(Abar, zs - prob.c.mean(axis=0) + prob.e.mean(axis=0))
    assert np.linalg.norm(v - ref) <= 1e-11
    assert np.linalg.norm(prob.hvp11_G(None, zs, x, v) + prob.grad_F(None, zs, x)[0]) <= 1e-12


def test_fd_hypergradient_trivial():
    x = np.array([0.7, -0.2])
    # trivial problem: h(x) = 1/2 ||x||^2
    np.testing.assert_allclose(fd_hypergradient(trivial_problem(), x, 1e-4), x, atol=1e-8)


@pytest.mark.parametrize("seed", range(3))
def test_fd_hypergradient_quadratic(seed):
    prob = make_quadratic(seed, 6, 4, 3, 3)
    x = np.random.default_rng(seed).standard_normal(4)
    g = prob.grad_h(x)
    fd = fd_hypergradient(prob, x)
    assert np.linalg.norm(fd - g) <= 1e-5 * max(1.0, np.linalg.norm(g))
    D = full_directions(prob, JointState(prob.z_star(x), prob.v_star(x), x), OracleLedger())
    assert np.linalg.norm(fd - D.dx) <= 1e-5 * max(1.0, np.linalg.norm(D.dx))


def test_fd_error_is_second_order():
    # h is exactly quadratic on quadratic instances, where central differences
    # have no truncation error; the logistic task shows the h^2 decay
    prob = hyperparam(1)
    x = np.full(prob.d, -0.5)
    ref = implicit_hypergradient(prob, x, tol=1e-12)
    errs = [np.linalg.norm(fd_hypergradient(prob, x, h, 1e-12) - ref) for h in (0.2, 0.1, 0.05)]
    for a, b in zip(errs, errs[1:]):
        assert a / b == pytest.approx(4.0, rel=0.2)


def test_implicit_matches_fd_on_logistic():
    prob = hyperparam(2)
    x = np.random.default_rng(2).uniform(-2, 1, size=prob.d)
    ref = implicit_hypergradient(prob, x)
    fd = fd_hypergradient(prob, x, 1e-4, 1e-11)
    assert np.linalg.norm(fd - ref) <= 1e-6 * max(1.0, np.linalg.norm(ref))


def test_mse_single_summand_is_zero():
    prob = make_quadratic(0, 3, 2, 1, 1)
    u0 = JointState(np.ones(3), np.ones(3), np.ones(2))
    rep = mse_enumerate(prob, u0, 4, 0.2, 0.2)
    for rows in rep.values():
        for r in rows:
            assert abs(r["lhs"]) <= 1e-24 and abs(r["rhs"]) <= 1e-12


@pytest.mark.parametrize("seed,q,rho,gamma", [(0, 3, 0.2, 0.3), (1, 3, 0.05, 0.5),
                                              (2, 4, 0.3, 0.1)])
def test_mse_identity(seed, q, rho, gamma):
    prob = make_quadratic(seed, 4, 3, 2, 2)
    rng = np.random.default_rng(seed)
    u0 = JointState(rng.standard_normal(4), rng.standard_normal(4), rng.standard_normal(3))
    rep = mse_enumerate(prob, u0, q, rho, gamma)
    for rows in rep.values():
        # reset exactness up to the rounding of (rho D) / rho
        assert rows[0]["lhs"] <= 1e-28
        for r in rows:
            assert abs(r["lhs"] - r["rhs"]) <= 1e-10
        assert rows[-1]["lhs"] > 1e-6


def test_mse_identity_on_logistic():
    tr, w = make_two_class(7, 2, n_features=3, n_informative=3)
    va, _ = make_two_class(8, 2, n_features=3, w_true=w)
    small = make_hyperparam_problem(tr, va)
    rng = np.random.default_rng(0)
    u0 = JointState(rng.standard_normal(3), rng.standard_normal(3), rng.standard_normal(3))
    rep = mse_enumerate(small, u0, 3, 0.3, 0.3)
    for rows in rep.values():
        for r in rows:
            assert abs(r["lhs"] - r["rhs"]) <= 1e-10


def test_mse_enumeration_guard():
    prob = make_quadratic(0, 3, 2, 8, 8)
    with pytest.raises(EnumerationTooLargeError):
        mse_enumerate(prob, JointState.zeros(prob), 4, 0.1, 0.1)


# -- suites ------------------------------------------------------------------------

def test_all_suites_pass():
    checks = run_suites()
    assert checks and all(c.passed for c in checks), format_table(checks)
    names = {c.suite for c in checks}
    assert {"oracle", "hypergradient", "mse", "projection", "zerochain"} <= names
    payload = json.loads(checks_to_json(checks))
    assert len(payload) == len(checks)


def test_injected_hvp_fault_is_detected():
    checks = run_suites("hypergradient", lambda *a: PerturbedHvp(make_quadratic(*a), 1e-3))
    assert checks and not any(c.passed for c in checks)


def test_perturbed_wrapper_delegates():
    base = make_quadratic(0, 3, 2, 2, 2)
    wrapped = PerturbedHvp(base, 0.5)
    x = np.ones(2)
    np.testing.assert_array_equal(wrapped.z_star(x), base.z_star(x))
    v = np.ones(3)
    np.testing.assert_allclose(wrapped.hvp11_G(None, x[:1].repeat(3), x, v),
                               base.hvp11_G(None, x[:1].repeat(3), x, v) + 0.5 * v)


def test_empty_suite_guard():
    with pytest.raises(ConfigurationError):
        run_suites("no-such-suite")


def test_format_table_marks_failures():
    checks = run_suites("projection")
    text = format_table(checks)
    assert "PASS" in text and "FAIL" not in text
    assert math.isfinite(sum(c.seconds for c in checks))
