"""View and object kernels and the low-rank factor of their product.

The sample covariance is ``K[n, m] = Kview[q_n, q_m] * Kobj[p_n, p_m] + alpha * I``.
With a linear object kernel ``Kobj = X X^T`` and a view factor
``Kview = Lv Lv^T`` (Lv of shape Q x Q'), the product kernel equals
``V V^T`` for ``V[n] = kron(X[p_n], Lv[q_n])``, so ``H = M * Q'``.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T

EIG_RTOL = 1e-10


def _raw(value, dtype=np.float64):
    return np.asarray(value, dtype=dtype).reshape(())


def periodic_se(delta, beta_raw, nu_raw, period=np.pi):
    """Periodic squared-exponential covariance for an angle difference.

    ``beta * exp(-2 sin^2(pi |delta| / period) / nu^2)`` with
    ``beta = exp(beta_raw)``, ``nu = exp(nu_raw)``.  ``period=pi`` gives
    ``sin^2(|delta|)``.
    """
    s = np.sin(np.pi * np.abs(delta) / period)
    return np.exp(beta_raw) * np.exp(-2.0 * s * s / np.exp(2.0 * nu_raw))


def view_factor(C, rtol=EIG_RTOL):
    """Factor a symmetric PSD matrix as ``L L^T`` by eigendecomposition.

    Eigenvalues below ``rtol * max_eig`` are dropped, so ``L`` has
    shape ``(Q, Q')`` with ``Q'`` the numerical rank.
    """
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValueError(f"view covariance must be square, got {C.shape}")
    scale = max(np.abs(C).max(), 1e-300)
    if not np.allclose(C, C.T, rtol=0.0, atol=1e-12 * scale):
        raise ValueError("view covariance is not symmetric")
    w, U = np.linalg.eigh(0.5 * (C + C.T))
    keep = _kept(w, rtol)
    return U[:, keep] * np.sqrt(w[keep])


def _kept(w, rtol):
    top = w.max(initial=0.0)
    if top <= 0.0:
        # degenerate all-zero covariance: one zero column keeps shapes valid
        keep = np.zeros(w.shape, dtype=bool)
        keep[-1] = True
        return keep
    return w > rtol * top


def sym_factor(C, rtol=EIG_RTOL):
    """Differentiable version of :func:`view_factor` on a tensor.

    Only ``L L^T`` is meaningful downstream, so the backward pass maps an
    upstream gradient ``G = 2 S L`` back to ``P S P`` with ``P`` the
    projector onto the kept eigenspace.  This is exact whenever
    perturbations of ``C`` stay in its range (in particular for full-rank
    ``C``), and is independent of the eigenvector basis chosen inside
    degenerate eigenspaces.
    """
    Cd = 0.5 * (C.data + C.data.T)
    w, U = np.linalg.eigh(Cd)
    keep = _kept(w, rtol)
    Uk, wk = U[:, keep], np.maximum(w[keep], 0.0)
    root = np.sqrt(wk)
    out = Uk * root

    def backward(g):
        inv = np.where(root > 0, 1.0 / np.where(root > 0, root, 1.0), 0.0)
        tmat = 0.5 * (g * inv) @ Uk.T
        pt = Uk @ (Uk.T @ tmat)
        return (0.5 * (pt + pt.T),)

    return T.custom_op(out, (C,), backward)


def kron_rows(Xp, Lq):
    """Row-wise Kronecker product: ``out[n] = kron(Xp[n], Lq[n])``."""
    if isinstance(Xp, T.Tensor) or isinstance(Lq, T.Tensor):
        n, m = Xp.shape
        h = Lq.shape[1]
        prod = T.mul(T.reshape(T._as_tensor(Xp), (n, m, 1)), T.reshape(T._as_tensor(Lq), (n, 1, h)))
        return T.reshape(prod, (n, m * h))
    Xp, Lq = np.asarray(Xp), np.asarray(Lq)
    return (Xp[:, :, None] * Lq[:, None, :]).reshape(Xp.shape[0], -1)


def build_factor(X, L_view, p_ids, q_ids):
    """Low-rank factor rows ``V[n] = kron(X[p_n], L_view[q_n])`` (numpy)."""
    X, L_view = np.asarray(X), np.asarray(L_view)
    p_ids, q_ids = np.asarray(p_ids, dtype=np.int64), np.asarray(q_ids, dtype=np.int64)
    if p_ids.shape != q_ids.shape:
        raise ValueError("object and view id arrays differ in length")
    if p_ids.size and (p_ids.min() < 0 or p_ids.max() >= X.shape[0]):
        raise IndexError(f"object id out of range [0, {X.shape[0]})")
    if q_ids.size and (q_ids.min() < 0 or q_ids.max() >= L_view.shape[0]):
        raise IndexError(f"view id out of range [0, {L_view.shape[0]})")
    return kron_rows(X[p_ids], L_view[q_ids])


@dataclass
class LowRankCov:
    """``K = V V^T + alpha I`` together with the sample assignments."""

    V: np.ndarray
    alpha: float
    p_ids: np.ndarray
    q_ids: np.ndarray

    @property
    def rank(self):
        return self.V.shape[1]

    def dense(self):
        return self.V @ self.V.T + self.alpha * np.eye(self.V.shape[0])


class LinearKernel:
    """Object kernel ``k(x, x') = x . x'``."""

    def __call__(self, X, X2=None):
        X = np.asarray(X)
        return X @ (X if X2 is None else np.asarray(X2)).T

    def factor(self, X):
        return X


class PeriodicSEKernel:
    """Periodic SE view kernel over angles with raw (log-space) parameters."""

    kind = "periodic"

    def __init__(self, angles, beta_raw=0.0, nu_raw=0.0, period=np.pi):
        self.angles = np.asarray(angles, dtype=np.float64).reshape(-1)
        self.period = float(period)
        self.params = {"beta_raw": T.Tensor(_raw(beta_raw), requires_grad=True, name="gp.view.beta_raw"),
                       "nu_raw": T.Tensor(_raw(nu_raw), requires_grad=True, name="gp.view.nu_raw")}
        s = np.sin(np.pi * np.abs(self.angles[:, None] - self.angles[None, :]) / self.period)
        self._sin2 = s * s

    @property
    def beta(self):
        return float(np.exp(self.params["beta_raw"].data))

    @property
    def nu(self):
        return float(np.exp(self.params["nu_raw"].data))

    def covariance(self):
        """Q x Q view covariance as a tensor."""
        p = self.params
        inv_nu2 = T.exp(T.mul(p["nu_raw"], -2.0))
        return T.mul(T.exp(p["beta_raw"]), T.exp(T.mul(T.Tensor(-2.0 * self._sin2), inv_nu2)))

    def factor(self):
        return sym_factor(self.covariance())

    def meta(self):
        return {"kind": self.kind, "period": self.period, "angles": self.angles.tolist()}


class FullRankViewCov:
    """Free-form view covariance ``C = L L^T`` with lower-triangular ``L``.

    The raw parameter is a Q x Q matrix; its strict lower triangle is
    used as is and its diagonal passes through ``exp``.  A zero raw matrix
    gives ``C = I``.
    """

    kind = "fullrank"

    def __init__(self, n_views, raw=None):
        q = int(n_views)
        raw = np.zeros((q, q)) if raw is None else np.asarray(raw, dtype=np.float64)
        self.params = {"chol_raw": T.Tensor(raw.copy(), requires_grad=True, name="gp.view.chol_raw")}
        self._strict = np.tril(np.ones((q, q)), -1)
        self._eye = np.eye(q)

    def factor(self):
        raw = self.params["chol_raw"]
        return T.add(T.mul(raw, T.Tensor(self._strict)), T.mul(T.exp(raw), T.Tensor(self._eye)))

    def covariance(self):
        L = self.factor()
        return T.matmul(L, T.transpose(L))

    def meta(self):
        return {"kind": self.kind, "n_views": int(self._eye.shape[0])}


class GPPrior:
    """GP prior parameters: view kernel, object features X and noise alpha."""

    def __init__(self, view_kernel, n_objects, object_dim, alpha_raw=0.0, seed=0, X=None):
        self.view_kernel = view_kernel
        self.object_kernel = LinearKernel()
        if X is None:
            rng = np.random.default_rng(seed)
            X = rng.normal(scale=1.0 / np.sqrt(object_dim), size=(n_objects, object_dim))
        self.X = T.Tensor(np.asarray(X, dtype=np.float64), requires_grad=True, name="gp.x")
        self.alpha_raw = T.Tensor(_raw(alpha_raw), requires_grad=True, name="gp.alpha_raw")

    @property
    def alpha(self):
        return float(np.exp(self.alpha_raw.data))

    def named_parameters(self):
        out = {"gp.x": self.X, "gp.alpha_raw": self.alpha_raw}
        for k, v in self.view_kernel.params.items():
            out["gp.view." + k] = v
        return out

    def alpha_tensor(self):
        return T.exp(self.alpha_raw)

    def factor_rows(self, p_ids, q_ids, L_view=None):
        """Graph-building factor rows for the given samples."""
        if L_view is None:
            L_view = self.view_kernel.factor()
        return kron_rows(T.take_rows(self.X, p_ids), T.take_rows(L_view, q_ids))

    def lowrank(self, p_ids, q_ids):
        with T.no_grad():
            L_view = self.view_kernel.factor().data
        V = build_factor(self.X.data, L_view, p_ids, q_ids)
        return LowRankCov(V, self.alpha, np.asarray(p_ids), np.asarray(q_ids))

    def view_covariance(self):
        with T.no_grad():
            return self.view_kernel.covariance().data.copy()

    def object_covariance(self):
        return self.object_kernel(self.X.data)

    def meta(self):
        return {"view": self.view_kernel.meta(), "n_objects": int(self.X.shape[0]),
                "object_dim": int(self.X.shape[1])}
