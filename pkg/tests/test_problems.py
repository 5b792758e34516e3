import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from srba import OracleLedger
from srba.directions import JointState, full_directions
from srba.errors import DimensionMismatchError, EmptyDatasetError, ParseError, PreconditionError
from srba.oracle import hvp_linearity_error, strong_convexity_gap
from srba.problems import (
    Dataset,
    QuadraticBilevel,
    load_csv,
    load_dataset,
    load_libsvm,
    logistic_loss,
    make_blobs,
    make_datacleaning,
    make_hyperparam_problem,
    make_quadratic,
    make_two_class,
    write_csv,
    write_libsvm,
)


def fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def small_hyperparam(seed=0, n=8, m=6, p=5):
    tr, w = make_two_class(seed, n, n_features=p, n_informative=p)
    va, _ = make_two_class(seed + 1, m, n_features=p, w_true=w)
    return make_hyperparam_problem(tr, va)


def small_cleaning(seed=0, n=12, m=9, p_c=0.3):
    tr, c = make_blobs(seed, n, n_features=4)
    va, _ = make_blobs(seed + 1, m, n_features=4, centers=c)
    return make_datacleaning(tr, va, p_c, seed=seed)


# -- quadratic --------------------------------------------------------------

def test_scalar_quadratic_hand_solved():
    one = np.ones((1, 1, 1))
    prob = QuadraticBilevel(A=one, B=one, c=np.zeros((1, 1)), M=np.zeros((1, 1, 1)),
                            e=np.zeros((1, 1)))
    for x in (-2.0, 0.5, 3.0):
        xv = np.array([x])
        assert prob.z_star(xv)[0] == pytest.approx(x, abs=1e-15)
        assert prob.v_star(xv)[0] == pytest.approx(-x, abs=1e-15)
        assert prob.grad_h(xv)[0] == pytest.approx(x, abs=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_quadratic_gradient_matches_finite_differences(seed):
    prob = make_quadratic(seed, 6, 4, 4, 3)
    x = np.random.default_rng(seed).standard_normal(4)
    ref = fd_grad(prob.h, x, 1e-5)
    g = prob.grad_h(x)
    assert np.linalg.norm(g - ref) <= 1e-6 * max(1.0, np.linalg.norm(ref))


def test_quadratic_z_star_first_order_condition():
    prob = make_quadratic(3, 7, 5, 6, 2)
    x = np.random.default_rng(3).standard_normal(5)
    u = JointState(prob.z_star(x), np.zeros(7), x)
    assert np.linalg.norm(full_directions(prob, u, OracleLedger()).dz) <= 1e-10


def test_quadratic_spectrum_and_errors():
    prob = make_quadratic(0, 5, 3, 4, 2, mu_min=0.5, L_max=3.0)
    eig = np.linalg.eigvalsh(prob.A)
    assert eig.min() >= 0.5 - 1e-10 and eig.max() <= 3.0 + 1e-10
    with pytest.raises(ValueError):
        make_quadratic(0, 3, 2, 2, 2, mu_min=2.0, L_max=1.0)
    with pytest.raises(ValueError):
        make_quadratic(0, 3, 2, 2, 2, mu_min=0.0)


def test_quadratic_argmin():
    prob = make_quadratic(1, 4, 3, 3, 3)
    x = prob.argmin_h()
    assert np.linalg.norm(prob.grad_h(x)) <= 1e-10
    rng = np.random.default_rng(0)
    assert all(prob.h(x + 1e-3 * rng.standard_normal(3)) > prob.h_min() for _ in range(20))


# -- datasets ---------------------------------------------------------------

def test_libsvm_examples(tmp_path):
    f = tmp_path / "a.svm"
    f.write_text("1 1:0.5 3:-2\n-1\n")
    ds = load_libsvm(f)
    np.testing.assert_array_equal(ds.dense(), [[0.5, 0, -2], [0, 0, 0]])
    np.testing.assert_array_equal(ds.labels, [1, -1])
    assert sp.issparse(ds.features)


def test_libsvm_comments_blank_lines_and_width(tmp_path):
    f = tmp_path / "b.svm"
    f.write_text("# header\n\n2 2:1.5  # trailing\n0 1:1\n")
    ds = load_libsvm(f, n_features=4)
    assert ds.features.shape == (2, 4)
    np.testing.assert_array_equal(ds.labels, [2, 0])


@pytest.mark.parametrize("text,line", [
    ("1 1:0.5\nx 2:1\n", 2),
    ("1 1:0.5 3\n", 1),
    ("1 0:1\n", 1),
    ("1 3:1 2:1\n", 1),
    ("1 1:abc\n", 1),
    ("1 1:1\n1 1:1\n1 2:nan\n", 3),
])
def test_libsvm_parse_errors_carry_line(tmp_path, text, line):
    f = tmp_path / "bad.svm"
    f.write_text(text)
    with pytest.raises(ParseError) as exc:
        load_libsvm(f)
    assert exc.value.line == line


def test_libsvm_empty(tmp_path):
    f = tmp_path / "empty.svm"
    f.write_text("# nothing\n\n")
    with pytest.raises(EmptyDatasetError):
        load_libsvm(f)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_libsvm_round_trip(tmp_path_factory, n, p, seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p)) * (rng.random((n, p)) < 0.5)
    y = rng.integers(-1, 2, size=n)
    path = tmp_path_factory.mktemp("rt") / "d.svm"
    write_libsvm(Dataset(sp.csr_matrix(X), y), path)
    back = load_libsvm(path, n_features=p)
    np.testing.assert_array_equal(back.dense(), X)
    np.testing.assert_array_equal(back.labels, y)


def test_csv_round_trip_and_dispatch(tmp_path):
    ds, _ = make_blobs(0, 20, n_features=3)
    path = tmp_path / "d.csv"
    write_csv(ds, path)
    back = load_dataset(path)
    np.testing.assert_array_equal(back.dense(), ds.dense())
    np.testing.assert_array_equal(back.labels, ds.labels)
    bad = tmp_path / "bad.csv"
    bad.write_text("label,f0\n1,2\n1\n")
    with pytest.raises(ParseError) as exc:
        load_csv(bad)
    assert exc.value.line == 3


def test_dataset_rejects_non_finite():
    with pytest.raises(ValueError):
        Dataset(np.array([[np.nan]]), np.array([1]))


# -- hyperparameter selection ------------------------------------------------

def test_logistic_loss_stable():
    u = np.array([-800.0, -1.0, 0.0, 1.0, 800.0])
    np.testing.assert_allclose(logistic_loss(u), [800.0, math.log1p(math.e), math.log(2),
                                                  math.log1p(math.exp(-1)), 0.0], rtol=1e-15)


def test_hyperparam_at_theta_zero():
    prob = small_hyperparam()
    lam = np.random.default_rng(0).standard_normal(prob.d)
    v = np.random.default_rng(1).standard_normal(prob.p)
    z = np.zeros(prob.p)
    X = prob.Xtr
    # data curvature at margin zero is 1/4 for every sample
    want = X.T @ (X @ v) / (4 * prob.n) + np.exp(lam) * v
    np.testing.assert_allclose(prob.hvp11_G(None, z, lam, v), want, atol=1e-12)
    assert not prob.jvp21_G(None, z, lam, v).any()
    # regularisation contributes nothing to grad1_G at theta = 0
    ref = -(X.T @ prob.ytr) / (2 * prob.n)
    np.testing.assert_allclose(prob.grad1_G(None, z, lam), ref, atol=1e-12)


def test_hyperparam_hvp_vs_dense_hessian():
    prob = small_hyperparam(n=8, p=5)
    rng = np.random.default_rng(2)
    z, lam = rng.standard_normal(5), rng.standard_normal(5)
    X, y = prob.Xtr, prob.ytr
    s = expit(y * (X @ z))
    H = X.T @ np.diag(s * (1 - s)) @ X / 8 + np.diag(np.exp(lam))
    for _ in range(5):
        v = rng.standard_normal(5)
        np.testing.assert_allclose(prob.hvp11_G(None, z, lam, v), H @ v, atol=1e-10)


def test_hyperparam_oracles_vs_finite_differences():
    prob = small_hyperparam(n=10, m=7, p=4)
    rng = np.random.default_rng(3)
    z, lam, v = rng.standard_normal(4), rng.standard_normal(4), rng.standard_normal(4)
    np.testing.assert_allclose(prob.grad1_G(None, z, lam),
                               fd_grad(lambda t: prob.value_G(t, lam), z), atol=1e-7)
    np.testing.assert_allclose(prob.grad_F(None, z, lam)[0],
                               fd_grad(lambda t: prob.value_F(t, lam), z), atol=1e-7)
    # cross derivative: d/dlam <grad1_G, v>
    np.testing.assert_allclose(prob.jvp21_G(None, z, lam, v),
                               fd_grad(lambda l: prob.grad1_G(None, z, l) @ v, lam), atol=1e-7)


def test_hyperparam_dimension_mismatch():
    a, _ = make_two_class(0, 5, n_features=3)
    b, _ = make_two_class(1, 5, n_features=4)
    with pytest.raises(DimensionMismatchError):
        make_hyperparam_problem(a, b)


def test_hyperparam_inner_descent_is_monotone():
    prob = small_hyperparam(n=30, p=5)
    lam = np.full(5, -1.0)
    z = np.zeros(5)
    vals = [prob.value_G(z, lam)]
    for _ in range(50):
        g = prob.grad1_G(None, z, lam)
        # exact line search on the convex inner objective via golden section
        from scipy.optimize import minimize_scalar
        step = minimize_scalar(lambda s: prob.value_G(z - s * g, lam), bounds=(0, 10),
                               method="bounded").x
        z = z - step * g
        vals.append(prob.value_G(z, lam))
    assert np.all(np.diff(vals) <= 1e-14)


# -- datacleaning -------------------------------------------------------------

def test_datacleaning_no_corruption():
    tr, c = make_blobs(0, 50, n_features=4)
    va, _ = make_blobs(1, 20, n_features=4, centers=c)
    prob, mask = make_datacleaning(tr, va, 0.0)
    assert not mask.any()
    np.testing.assert_array_equal(prob.ytr, tr.labels)


def test_datacleaning_corruption_changes_class_and_rate():
    tr, c = make_blobs(5, 4000, n_features=4)
    va, _ = make_blobs(6, 20, n_features=4, centers=c)
    p_c = 0.3
    prob, mask = make_datacleaning(tr, va, p_c, seed=5)
    assert np.all(prob.ytr[mask] != tr.labels[mask])
    assert np.all(prob.ytr[~mask] == tr.labels[~mask])
    sd = math.sqrt(p_c * (1 - p_c) / 4000)
    assert abs(mask.mean() - p_c) <= 3 * sd


def test_datacleaning_invalid_p():
    tr, c = make_blobs(0, 10, n_features=4)
    with pytest.raises(PreconditionError):
        make_datacleaning(tr, tr, 1.0)
    with pytest.raises(PreconditionError):
        make_datacleaning(tr, tr, 0.2, C_r=0.0)


def test_datacleaning_saturated_weight_silences_sample():
    prob, _ = small_cleaning()
    rng = np.random.default_rng(0)
    z = rng.standard_normal(prob.p)
    lam = np.zeros(prob.d)
    lam[3] = -30.0
    contribution = prob.grad1_G(np.array([3]), z, lam) - 2 * prob.C_r * z
    assert np.linalg.norm(contribution) <= 1e-12


def test_datacleaning_weight_gradient():
    prob, _ = small_cleaning()
    rng = np.random.default_rng(1)
    z, lam = rng.standard_normal(prob.p), rng.standard_normal(prob.d)
    s = expit(lam)
    np.testing.assert_allclose(prob.grad2_G(z, lam),
                               s * (1 - s) * prob.losses(z, prob.Xtr, prob.ytr) / prob.n,
                               rtol=1e-14)
    np.testing.assert_allclose(prob.grad2_G(z, lam),
                               fd_grad(lambda l: prob.value_G(z, l), lam), atol=1e-8)


def test_datacleaning_oracles_vs_finite_differences():
    prob, _ = small_cleaning()
    rng = np.random.default_rng(2)
    z, lam, v = rng.standard_normal(prob.p), rng.standard_normal(prob.d), rng.standard_normal(prob.p)
    np.testing.assert_allclose(prob.grad1_G(None, z, lam),
                               fd_grad(lambda t: prob.value_G(t, lam), z), atol=1e-7)
    np.testing.assert_allclose(prob.grad_F(None, z, lam)[0],
                               fd_grad(lambda t: prob.value_F(t, lam), z), atol=1e-7)
    np.testing.assert_allclose(prob.hvp11_G(None, z, lam, v),
                               fd_grad(lambda t: prob.grad1_G(None, t, lam) @ v, z), atol=1e-6)
    np.testing.assert_allclose(prob.jvp21_G(None, z, lam, v),
                               fd_grad(lambda l: prob.grad1_G(None, z, l) @ v, lam), atol=1e-7)
    # the per-sample jvp only touches its own weight
    single = prob.jvp21_G(np.array([4]), z, lam, v)
    assert np.count_nonzero(single) <= 1


# -- probes on every shipped instance -------------------------------------------

@pytest.mark.parametrize("make", [
    lambda: make_quadratic(0, 5, 3, 4, 3),
    small_hyperparam,
    lambda: small_cleaning()[0],
])
def test_probes_on_shipped_problems(make):
    prob = make()
    rng = np.random.default_rng(0)
    assert strong_convexity_gap(prob, rng) >= -1e-10
    assert hvp_linearity_error(prob, rng) <= 1e-9
