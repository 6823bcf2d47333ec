"""Linear algebra on ``K = V V^T + alpha I`` in O(N H^2 + H^3).

All routines work in float64 and go through the H x H capacitance
matrix ``alpha I + V^T V`` (Woodbury identity, matrix determinant lemma).
"""

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from . import memtrack

JITTER = 1e-10
LOG_2PI = np.log(2.0 * np.pi)


class CapacitanceFactor:
    """Cholesky factor of ``alpha I_H + V^T V`` (plus ``1e-10 * alpha`` jitter)."""

    def __init__(self, V, alpha):
        V = np.asarray(V, dtype=np.float64)
        alpha = float(alpha)
        if not np.isfinite(alpha) or not np.all(np.isfinite(V)):
            raise FloatingPointError("non-finite noise alpha or factor V")
        if not alpha > 0:
            raise ValueError(f"noise alpha must be positive, got {alpha}")
        self.V = V
        self.alpha = alpha
        self.VtV = V.T @ V
        cap = self.VtV + (alpha * (1.0 + JITTER)) * np.eye(V.shape[1])
        try:
            self.chol = cho_factor(cap, lower=True, check_finite=False)
        except LinAlgError as exc:
            raise FloatingPointError("capacitance matrix is not positive definite") from exc

    @property
    def n(self):
        return self.V.shape[0]

    def solve(self, M):
        """``K^{-1} M`` for an N x k (or length-N) right-hand side."""
        M = np.asarray(M, dtype=np.float64)
        inner = cho_solve(self.chol, self.V.T @ M, check_finite=False)
        out = self.V @ inner
        np.subtract(M, out, out=out)
        out /= self.alpha
        return memtrack.record(out, "woodbury_solve")

    def logdet(self):
        """Per-matrix ``log det K = N log alpha + log det(I + V^T V / alpha)``."""
        h = self.V.shape[1]
        ld_cap = 2.0 * np.sum(np.log(np.diag(self.chol[0])))
        # the jittered diagonal cancels exactly when V = 0
        return self.n * np.log(self.alpha) + ld_cap - h * np.log(self.alpha * (1.0 + JITTER))

    def trace_inv(self):
        """``tr(K^{-1}) = N / alpha - tr((alpha I + V^T V)^{-1} V^T V) / alpha``."""
        inner = cho_solve(self.chol, self.VtV, check_finite=False)
        return self.n / self.alpha - np.trace(inner) / self.alpha


def woodbury_solve(V, alpha, M):
    return CapacitanceFactor(V, alpha).solve(M)


def logdet(V, alpha):
    return CapacitanceFactor(V, alpha).logdet()


def trace_inv(V, alpha):
    return CapacitanceFactor(V, alpha).trace_inv()


def gp_log_density(Z, V, alpha, factor=None):
    """Sum over latent columns of ``log N(z_l | 0, V V^T + alpha I)``."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim == 1:
        Z = Z[:, None]
    fac = factor or CapacitanceFactor(V, alpha)
    if Z.shape[0] != fac.n:
        raise ValueError(f"Z has {Z.shape[0]} rows but V has {fac.n}")
    n, L = Z.shape
    quad = np.sum(Z * fac.solve(Z))
    return -0.5 * quad - 0.5 * L * fac.logdet() - 0.5 * n * L * LOG_2PI


def gp_predict_latent(v_star, V, alpha, Z_train, factor=None):
    """GP posterior mean ``v_star V^T K^{-1} Z_train`` for one or more query rows."""
    v_star = np.atleast_2d(np.asarray(v_star, dtype=np.float64))
    fac = factor or CapacitanceFactor(V, alpha)
    if v_star.shape[1] != fac.V.shape[1]:
        raise ValueError(f"query rows have width {v_star.shape[1]}, factor has {fac.V.shape[1]}")
    weights = fac.V.T @ fac.solve(Z_train)
    return v_star @ weights
