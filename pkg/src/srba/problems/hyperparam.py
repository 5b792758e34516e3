"""Per-feature regularisation selection for binary logistic regression.

Inner: ``G_i(theta, lam) = phi(y_i <a_i, theta>) + 1/2 sum_k exp(lam_k) theta_k^2``
Outer: ``F_j(theta, lam) = phi(y_j <b_j, theta>)`` on the validation split,
with ``phi(u) = log(1 + exp(-u))``.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from ..errors import DimensionMismatchError
from ..oracle import BilevelProblem, Regularity
from .datasets import Dataset


def logistic_loss(u):
    """``log(1 + exp(-u))`` evaluated without overflow."""
    u = np.asarray(u, dtype=float)
    return np.log1p(np.exp(-np.abs(u))) + np.maximum(0.0, -u)


def _rows(X, idx):
    return X if idx is None else X[idx]


def _binary_labels(y):
    y = np.asarray(y)
    vals = set(np.unique(y).tolist())
    if vals <= {-1, 1}:
        return y.astype(float)
    if vals <= {0, 1}:
        return np.where(y == 1, 1.0, -1.0)
    raise ValueError(f"binary task expects labels in {{-1, 1}} or {{0, 1}}, got {sorted(vals)}")


class HyperparamLogReg(BilevelProblem):
    def __init__(self, train: Dataset, val: Dataset, lambda_floor: float = -4.0):
        if train.n_features != val.n_features:
            raise DimensionMismatchError(
                f"train has {train.n_features} features, validation has {val.n_features}"
            )
        self.Xtr = train.features.tocsr() if sp.issparse(train.features) else np.asarray(train.features)
        self.Xval = val.features.tocsr() if sp.issparse(val.features) else np.asarray(val.features)
        self.ytr = _binary_labels(train.labels)
        self.yval = _binary_labels(val.labels)
        self.n = train.n_samples
        self.m = val.n_samples
        self.p = train.n_features
        self.d = self.p
        self._check_dims()
        self.lambda_floor = lambda_floor
        row_sq_tr = np.asarray(_sq_row_norms(self.Xtr))
        row_sq_val = np.asarray(_sq_row_norms(self.Xval))
        self._gram_top = _top_eig_gram(self.Xtr) / self.n
        # estimates: curvature of G from the explicit l2 term at the floor,
        # Lipschitz constant of F from |phi'| <= 1
        self.regularity = Regularity(
            mu_G=float(np.exp(lambda_floor)),
            L0_F=float(np.sqrt(row_sq_val.max())),
            L1_F=float(row_sq_val.max()) / 4,
            L1_G=float(row_sq_tr.max()) / 4 + 1.0,
            exact=False,
        )

    def _margins(self, X, y, idx, theta):
        return _rows(y, idx) * (_rows(X, idx) @ theta)

    def grad_F(self, idx, z, x):
        X = _rows(self.Xval, idx)
        y = _rows(self.yval, idx)
        coef = -y * expit(-(y * (X @ z)))
        g = np.asarray(X.T @ coef).ravel() / X.shape[0]
        return g, np.zeros(self.d)

    def grad1_G(self, idx, z, x):
        X = _rows(self.Xtr, idx)
        y = _rows(self.ytr, idx)
        coef = -y * expit(-(y * (X @ z)))
        return np.asarray(X.T @ coef).ravel() / X.shape[0] + np.exp(x) * z

    def hvp11_G(self, idx, z, x, v):
        X = _rows(self.Xtr, idx)
        y = _rows(self.ytr, idx)
        mg = y * (X @ z)
        curv = expit(mg) * expit(-mg)
        return np.asarray(X.T @ (curv * (X @ v))).ravel() / X.shape[0] + np.exp(x) * v

    def jvp21_G(self, idx, z, x, v):
        # d/dlam_k of (grad_theta G)_l = delta_kl exp(lam_k) theta_k
        return np.exp(x) * z * v

    def value_F(self, z, x, idx=None):
        X = _rows(self.Xval, idx)
        y = _rows(self.yval, idx)
        return float(np.mean(logistic_loss(y * (X @ z))))

    def value_G(self, z, x, idx=None):
        X = _rows(self.Xtr, idx)
        y = _rows(self.ytr, idx)
        return float(np.mean(logistic_loss(y * (X @ z))) + 0.5 * np.sum(np.exp(x) * z * z))

    def inner_constants(self, x):
        ex = np.exp(x)
        return float(ex.min()), float(self._gram_top / 4 + ex.max())


def _sq_row_norms(X):
    if sp.issparse(X):
        return np.asarray(X.multiply(X).sum(axis=1)).ravel()
    return np.sum(X * X, axis=1)


def _top_eig_gram(X):
    if sp.issparse(X):
        X = X.toarray()
    s = np.linalg.norm(X, ord=2)
    return float(s * s)


def make_hyperparam_problem(train: Dataset, val: Dataset, lambda_floor: float = -4.0) -> HyperparamLogReg:
    return HyperparamLogReg(train, val, lambda_floor=lambda_floor)
