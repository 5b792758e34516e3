"""Datacleaning: learn per-sample weights that down-weight corrupted labels.

Inner variable ``theta`` is a ``C x p`` linear classifier, flattened
row-major; outer variable ``lam`` has one entry per training sample.

    G_i(theta, lam) = sigmoid(lam_i) ce(theta d_i, y_i) + C_r ||theta||^2
    F_j(theta, lam) = ce(theta b_j, y_j)          (clean validation split)
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit, logsumexp, softmax

from ..errors import DimensionMismatchError, PreconditionError
from ..oracle import BilevelProblem, Regularity
from .datasets import Dataset


def corrupt_labels(labels, n_classes, p_c, rng):
    """Replace each label w.p. ``p_c`` by a uniformly drawn *different* class."""
    labels = np.asarray(labels)
    mask = rng.random(labels.shape[0]) < p_c
    shift = rng.integers(1, n_classes, size=labels.shape[0])
    noisy = np.where(mask, (labels + shift) % n_classes, labels)
    return noisy.astype(np.int64), mask


def _sel(a, idx):
    return a if idx is None else a[idx]


class DataCleaning(BilevelProblem):
    def __init__(self, train: Dataset, val: Dataset, C_r: float = 0.2, n_classes=None):
        if train.n_features != val.n_features:
            raise DimensionMismatchError("train/validation feature counts differ")
        if not C_r > 0:
            raise PreconditionError("C_r must be positive")
        self.Xtr = train.dense()
        self.Xval = val.dense()
        self.ytr = np.asarray(train.labels, dtype=np.int64)
        self.yval = np.asarray(val.labels, dtype=np.int64)
        if n_classes is None:
            n_classes = int(max(self.ytr.max(), self.yval.max())) + 1
        self.C = n_classes
        self.n_feat = train.n_features
        self.C_r = C_r
        self.n = train.n_samples
        self.m = val.n_samples
        self.p = self.C * self.n_feat
        self.d = self.n
        self._check_dims()
        row_sq_val = np.sum(self.Xval ** 2, axis=1)
        row_sq_tr = np.sum(self.Xtr ** 2, axis=1)
        # ||grad ce|| <= sqrt(2) ||b_j||; l2 term gives 2 C_r strong convexity
        self.regularity = Regularity(
            mu_G=2 * C_r,
            L0_F=float(np.sqrt(2 * row_sq_val.max())),
            L1_F=float(row_sq_val.max()),
            L1_G=float(row_sq_tr.max()) + 2 * C_r,
            exact=False,
        )

    def _theta(self, z):
        return z.reshape(self.C, self.n_feat)

    def _probs_and_residual(self, X, y, theta):
        logits = X @ theta.T
        s = softmax(logits, axis=1)
        r = s.copy()
        r[np.arange(len(y)), y] -= 1.0
        return s, r

    def grad_F(self, idx, z, x):
        X, y = _sel(self.Xval, idx), _sel(self.yval, idx)
        _, r = self._probs_and_residual(X, y, self._theta(z))
        return (r.T @ X).ravel() / X.shape[0], np.zeros(self.d)

    def grad1_G(self, idx, z, x):
        X, y = _sel(self.Xtr, idx), _sel(self.ytr, idx)
        w = expit(_sel(x, idx))
        _, r = self._probs_and_residual(X, y, self._theta(z))
        return ((w[:, None] * r).T @ X).ravel() / X.shape[0] + 2 * self.C_r * z

    def hvp11_G(self, idx, z, x, v):
        X, y = _sel(self.Xtr, idx), _sel(self.ytr, idx)
        w = expit(_sel(x, idx))
        s, _ = self._probs_and_residual(X, y, self._theta(z))
        Vd = X @ self._theta(v).T  # (batch, C)
        hv = s * Vd - s * np.sum(s * Vd, axis=1, keepdims=True)
        return ((w[:, None] * hv).T @ X).ravel() / X.shape[0] + 2 * self.C_r * v

    def jvp21_G(self, idx, z, x, v):
        X, y = _sel(self.Xtr, idx), _sel(self.ytr, idx)
        lam = _sel(x, idx)
        dsig = expit(lam) * expit(-lam)
        _, r = self._probs_and_residual(X, y, self._theta(z))
        # <(s - e_y) d^T, V> = sum_c r_c (V d)_c
        inner = np.sum(r * (X @ self._theta(v).T), axis=1)
        out = np.zeros(self.d)
        rows = np.arange(self.n) if idx is None else np.asarray(idx)
        np.add.at(out, rows, dsig * inner / X.shape[0])
        return out

    def losses(self, z, X, y):
        logits = X @ self._theta(z).T
        return logsumexp(logits, axis=1) - logits[np.arange(len(y)), y]

    def value_F(self, z, x, idx=None):
        return float(np.mean(self.losses(z, _sel(self.Xval, idx), _sel(self.yval, idx))))

    def value_G(self, z, x, idx=None):
        X, y = _sel(self.Xtr, idx), _sel(self.ytr, idx)
        w = expit(_sel(x, idx))
        return float(np.mean(w * self.losses(z, X, y)) + self.C_r * z @ z)

    def grad2_G(self, z, x):
        """Gradient of the full inner objective w.r.t. the sample weights."""
        lam = x
        return expit(lam) * expit(-lam) * self.losses(z, self.Xtr, self.ytr) / self.n

    def inner_constants(self, x):
        w = expit(x)
        top = np.linalg.eigvalsh((self.Xtr * w[:, None]).T @ self.Xtr / self.n)[-1]
        return 2 * self.C_r, float(0.5 * top + 2 * self.C_r)

    def accuracy(self, z, dataset: Dataset) -> float:
        pred = np.argmax(dataset.dense() @ self._theta(z).T, axis=1)
        return float(np.mean(pred == dataset.labels))


def make_datacleaning(train: Dataset, val: Dataset, p_c: float, C_r: float = 0.2, seed: int = 0,
                      n_classes=None):
    """Corrupt the training labels and build the problem.

    Returns ``(problem, mask)`` where ``mask[i]`` flags a corrupted label.
    """
    if not 0 <= p_c < 1:
        raise PreconditionError(f"corruption probability must lie in [0, 1), got {p_c}")
    if n_classes is None:
        n_classes = int(max(np.max(train.labels), np.max(val.labels))) + 1
    rng = np.random.default_rng(seed)
    noisy, mask = corrupt_labels(train.labels, n_classes, p_c, rng)
    problem = DataCleaning(Dataset(train.features, noisy), val, C_r=C_r, n_classes=n_classes)
    return problem, mask
