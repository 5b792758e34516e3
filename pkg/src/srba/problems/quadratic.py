"""Closed-form quadratic bilevel instances.

    G_i(z, x) = 1/2 z^T A_i z - z^T B_i x
    F_j(z, x) = 1/2 ||z - c_j||^2 + 1/2 x^T M_j x + e_j^T z

With bars denoting means over the summands, ``z*(x) = Abar^-1 Bbar x`` and
``h`` is a quadratic in ``x`` whose gradient and minimiser are available by
linear algebra.
"""

from __future__ import annotations

import numpy as np
from scipy import linalg as sla
from scipy.stats import ortho_group

from ..oracle import BilevelProblem, Regularity


def _sel(arr, idx):
    return arr if idx is None else arr[idx]


class QuadraticBilevel(BilevelProblem):
    def __init__(self, A, B, c, M, e, mu_G=None):
        self.A = np.asarray(A, dtype=float)
        self.B = np.asarray(B, dtype=float)
        self.c = np.asarray(c, dtype=float)
        self.M = np.asarray(M, dtype=float)
        self.e = np.asarray(e, dtype=float)
        self.n, self.p = self.A.shape[0], self.A.shape[1]
        self.d = self.B.shape[2]
        self.m = self.c.shape[0]
        self._check_dims()
        if self.A.shape != (self.n, self.p, self.p) or self.B.shape != (self.n, self.p, self.d):
            raise ValueError("A must be (n, p, p) and B (n, p, d)")
        if self.c.shape != (self.m, self.p) or self.e.shape != (self.m, self.p):
            raise ValueError("c and e must be (m, p)")
        if self.M.shape != (self.m, self.d, self.d):
            raise ValueError("M must be (m, d, d)")
        if not np.allclose(self.A, np.swapaxes(self.A, 1, 2)):
            raise ValueError("A_i must be symmetric")
        if not np.allclose(self.M, np.swapaxes(self.M, 1, 2)):
            raise ValueError("M_j must be symmetric")

        eig_A = np.linalg.eigvalsh(self.A)
        lam_min = float(eig_A.min())
        if lam_min <= 0:
            raise ValueError("every A_i must be positive definite")
        self.Abar = self.A.mean(axis=0)
        self.Bbar = self.B.mean(axis=0)
        self.cbar = self.c.mean(axis=0)
        self.Mbar = self.M.mean(axis=0)
        self.ebar = self.e.mean(axis=0)
        self._Acho = sla.cho_factor(self.Abar)
        # z*(x) = K x ; v*(x) = -Abar^-1 (K x - cbar + ebar)
        self.K = sla.cho_solve(self._Acho, self.Bbar)
        self.Hh = self.K.T @ self.K + self.Mbar
        self.gh = self.K.T @ (self.ebar - self.cbar)
        self._const = 0.5 * float(np.mean(np.sum(self.c ** 2, axis=1)))

        L1_F = max(1.0, float(np.abs(np.linalg.eigvalsh(self.M)).max()))
        self.regularity = Regularity(
            mu_G=lam_min if mu_G is None else mu_G,
            L0_F=None,  # quadratics are not globally Lipschitz
            L1_F=L1_F,
            L2_F=0.0,
            L1_G=max(float(eig_A.max()), float(np.linalg.norm(self.B, ord=2, axis=(1, 2)).max())),
            L2_G=0.0,
            L3_G=0.0,
            exact=True,
        )

    # -- oracles ------------------------------------------------------------
    def grad_F(self, idx, z, x):
        c = _sel(self.c, idx).mean(axis=0)
        e = _sel(self.e, idx).mean(axis=0)
        M = _sel(self.M, idx).mean(axis=0)
        return z - c + e, M @ x

    def grad1_G(self, idx, z, x):
        A = _sel(self.A, idx).mean(axis=0)
        B = _sel(self.B, idx).mean(axis=0)
        return A @ z - B @ x

    def hvp11_G(self, idx, z, x, v):
        return _sel(self.A, idx).mean(axis=0) @ v

    def jvp21_G(self, idx, z, x, v):
        return -(_sel(self.B, idx).mean(axis=0).T @ v)

    def value_F(self, z, x, idx=None):
        c = _sel(self.c, idx)
        M = _sel(self.M, idx)
        e = _sel(self.e, idx)
        vals = 0.5 * np.sum((z - c) ** 2, axis=1) + 0.5 * np.einsum("a,jab,b->j", x, M, x) + e @ z
        return float(vals.mean())

    def value_G(self, z, x, idx=None):
        A = _sel(self.A, idx).mean(axis=0)
        B = _sel(self.B, idx).mean(axis=0)
        return float(0.5 * z @ A @ z - z @ B @ x)

    def inner_constants(self, x):
        eig = np.linalg.eigvalsh(self.Abar)
        return float(eig[0]), float(eig[-1])

    # -- closed forms -------------------------------------------------------
    def z_star(self, x):
        return sla.cho_solve(self._Acho, self.Bbar @ x)

    def v_star(self, x):
        z = self.z_star(x)
        return -sla.cho_solve(self._Acho, z - self.cbar + self.ebar)

    def grad_h(self, x):
        """Hypergradient assembled from the implicit-function formula."""
        return self.Mbar @ x - self.Bbar.T @ self.v_star(x)

    def h(self, x):
        z = self.z_star(x)
        return float(0.5 * z @ z - z @ self.cbar + self._const + 0.5 * x @ self.Mbar @ x
                     + self.ebar @ z)

    def h_quadratic_form(self):
        """``(H, g)`` with ``grad h(x) = H x + g``."""
        return self.Hh, self.gh

    def argmin_h(self):
        return -np.linalg.solve(self.Hh, self.gh)

    def h_min(self):
        return self.h(self.argmin_h())


def trivial_problem(dim=2, n=1, m=1) -> QuadraticBilevel:
    """``G_i = 1/2 ||z - x||^2`` and ``F_j = 1/2 ||z||^2`` with identical summands."""
    eye = np.eye(dim)
    return QuadraticBilevel(
        A=np.repeat(eye[None], n, axis=0),
        B=np.repeat(eye[None], n, axis=0),
        c=np.zeros((m, dim)),
        M=np.zeros((m, dim, dim)),
        e=np.zeros((m, dim)),
    )


def make_quadratic(seed, p, d, n, m, mu_min=1.0, L_max=4.0, coupling=1.0,
                   outer_curvature=0.1, heterogeneity=1.0) -> QuadraticBilevel:
    """Random instance with every ``A_i`` spectrum in ``[mu_min, L_max]``.

    ``coupling`` scales ``B_i``; ``outer_curvature`` is the mean PSD part of
    ``M_j`` (keeps ``h`` strongly convex so a minimiser exists);
    ``heterogeneity`` scales the per-summand spread of ``c_j``/``e_j``.
    """
    if not 0 < mu_min <= L_max:
        raise ValueError(f"need 0 < mu_min <= L_max, got mu_min={mu_min}, L_max={L_max}")
    rng = np.random.default_rng(seed)
    A = np.empty((n, p, p))
    for i in range(n):
        Q = ortho_group.rvs(p, random_state=rng) if p > 1 else np.ones((1, 1))
        eig = rng.uniform(mu_min, L_max, size=p)
        eig[0], eig[-1] = mu_min, L_max  # pin the extremes
        A[i] = (Q * eig) @ Q.T
        A[i] = 0.5 * (A[i] + A[i].T)
    B = coupling * rng.standard_normal((n, p, d)) / np.sqrt(max(p, d))
    c = rng.standard_normal(p) + heterogeneity * rng.standard_normal((m, p))
    e = 0.1 * rng.standard_normal(p) + 0.1 * heterogeneity * rng.standard_normal((m, p))
    M = np.empty((m, d, d))
    for j in range(m):
        W = rng.standard_normal((d, d)) / np.sqrt(d)
        S = 0.5 * (W + W.T)
        M[j] = outer_curvature * (np.eye(d) + 0.5 * heterogeneity * S)
    return QuadraticBilevel(A, B, c, M, e, mu_G=mu_min)
