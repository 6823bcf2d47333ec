"""Linearised GP term and the low-memory full-batch gradient protocol.

The GP part of the loss, ``f(Z, V, alpha) = 1/2 sum_l z_l^T K^-1 z_l
+ (L/2) log det K`` with ``K = V V^T + alpha I``, couples all samples.
At the current parameters we replace it by its first-order expansion
``sum(A * Z) + sum(B * V) + c * alpha``; the coefficients are computed
once over all N samples from low-dimensional quantities only, and the
expansion is linear in per-sample rows, so its gradient can be
accumulated over minibatches.  Its gradient equals that of ``f`` at the
expansion point.
"""

from dataclasses import dataclass

import numpy as np

from . import memtrack
from . import tensor as T
from .lowrank import LOG_2PI, CapacitanceFactor


@dataclass
class TaylorCoeffs:
    A: np.ndarray  # df/dZ, N x L
    B: np.ndarray  # df/dV, N x H
    c: float       # df/dalpha
    f0: float      # f at the expansion point


def gp_objective(Z, V, alpha, factor=None):
    """Exact ``f`` (negative GP log-density without the ``NL/2 log 2pi`` constant)."""
    fac = factor or CapacitanceFactor(V, alpha)
    Z = np.asarray(Z, dtype=np.float64)
    return 0.5 * np.sum(Z * fac.solve(Z)) + 0.5 * Z.shape[1] * fac.logdet()


def taylor_coeffs(Z, V, alpha):
    Z = np.asarray(Z, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    fac = CapacitanceFactor(V, alpha)
    L = Z.shape[1]
    A = fac.solve(Z)
    # B = K^-1 (L V - Z (A^T V)) = -A A^T V + L K^-1 V
    W = V * float(L)
    W -= Z @ (A.T @ V)
    B = fac.solve(W)
    del W
    c = 0.5 * (-np.sum(A * A) + L * fac.trace_inv())
    f0 = 0.5 * np.sum(Z * A) + 0.5 * L * fac.logdet()
    return TaylorCoeffs(memtrack.record(A, "taylor.A"), memtrack.record(B, "taylor.B"), float(c), float(f0))


def proxy_gp_loss(z_rows, V_rows, alpha, coeffs, rows, n_total):
    """Batch contribution of the linearised GP term.

    ``sum(A[rows] * z_rows) + sum(B[rows] * V_rows) + (|rows| / N) c alpha``.
    The coefficients are constants; summed over a partition of the
    samples this equals the full proxy.
    """
    rows = np.asarray(rows)
    A, B = coeffs.A[rows], coeffs.B[rows]
    if A.shape != tuple(z_rows.shape) or B.shape != tuple(V_rows.shape):
        raise ValueError(
            f"stale Taylor coefficients: A{A.shape}/B{B.shape} vs z{tuple(z_rows.shape)}/V{tuple(V_rows.shape)}")
    out = T.add(T.tsum(T.mul(T.Tensor(A), z_rows)), T.tsum(T.mul(T.Tensor(B), V_rows)))
    return T.add(out, T.mul(alpha, coeffs.c * len(rows) / n_total))


@dataclass
class StepResult:
    grads: dict
    breakdown: object
    coeffs: TaylorCoeffs
    Z: np.ndarray


def draw_noise(rng, n, latent_dim):
    return rng.standard_normal((n, latent_dim))


def _batches(n, batch_size):
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    return [np.arange(s, min(s + batch_size, n)) for s in range(0, n, batch_size)]


def _check_finite(value, term):
    if not np.all(np.isfinite(value)):
        raise FloatingPointError(f"non-finite value in {term}")


def full_gradient_step(model, Y, p_ids, q_ids, objective, batch_size, eps=None, rng=None,
                       train_networks=True, gp_weight=None):
    """Full-data gradient of the GPPVAE loss with minibatch memory.

    1. draw (or take) the noise ``eps`` for all N samples;
    2. encode in minibatches without graphs to get ``Z``;
    3. compute the Taylor coefficients of the GP term over all N;
    4. re-run the minibatches with graphs on reconstruction +
       regularisation + proxy GP term, accumulating gradients;
    5. return the accumulated gradients.

    ``train_networks=False`` skips the network graphs (GP-only phase):
    only GP parameters (and sigma_y^2 in eq8 mode) get gradients.
    ``gp_weight`` overrides the objective's prior weight on the GP term.
    """
    prior = model.prior
    N = len(Y)
    L = model.latent_dim
    p_ids, q_ids = np.asarray(p_ids), np.asarray(q_ids)
    pw = objective.prior_weight
    gw = pw if gp_weight is None else float(gp_weight)
    batches = _batches(N, batch_size)

    with memtrack.step("noise"):
        if eps is None:
            eps = draw_noise(rng if rng is not None else np.random.default_rng(), N, L)
        eps = memtrack.record(np.asarray(eps, dtype=np.float64), "eps")
        if eps.shape != (N, L):
            raise ValueError(f"noise has shape {eps.shape}, expected {(N, L)}")

    # values only
    with memtrack.step("encode"):
        Z = memtrack.record(np.empty((N, L)), "Z")
        reg_value = 0.0
        sq_value = 0.0
        with T.no_grad():
            for rows in batches:
                mu, lv, z = model.sample(Y[rows].astype(model.dtype, copy=False), eps[rows])
                Z[rows] = z.data
                reg_value += -0.5 * float(np.sum(lv.data, dtype=np.float64))
                if not train_networks:
                    yhat = model.decode(z)
                    sq_value += float(np.sum((Y[rows].reshape(yhat.shape) - yhat.data) ** 2, dtype=np.float64))
        _check_finite(Z, "encoder output")

    with memtrack.step("coeffs"):
        lr = prior.lowrank(p_ids, q_ids)
        coeffs = taylor_coeffs(Z, lr.V, lr.alpha)
        del lr
        _check_finite(coeffs.A, "GP coefficient A")
        _check_finite(coeffs.B, "GP coefficient B")
        _check_finite(coeffs.c, "GP coefficient c")

    params = dict(model.named_parameters())
    params.update(objective.named_parameters())
    for p in params.values():
        p.zero_grad()

    with memtrack.step("accumulate"):
        if train_networks:
            for rows in batches:
                # graphs are single use, so shared nodes are rebuilt per batch
                rw = objective.recon_weight()
                alpha = prior.alpha_tensor()
                L_view = prior.view_kernel.factor()
                yb = Y[rows].astype(model.dtype, copy=False)
                mu, lv, z = model.sample(yb, eps[rows])
                yhat = model.decode(z)
                sq = T.tsum(T.square(T.sub(T.Tensor(yb.reshape(yhat.shape)), yhat)))
                reg = T.mul(T.tsum(lv), -0.5)
                proxy = proxy_gp_loss(z, prior.factor_rows(p_ids[rows], q_ids[rows], L_view),
                                      alpha, coeffs, rows, N)
                _check_finite(sq.data, "reconstruction term")
                _check_finite(reg.data, "regularization term")
                _check_finite(proxy.data, "GP proxy term")
                sq_value += float(sq.data)
                loss = T.add(T.mul(sq, rw), T.add(T.mul(reg, pw), T.mul(proxy, gw)))
                loss.backward()
        else:
            # networks frozen: Z is a constant and the proxy needs no images
            rows = np.arange(N)
            proxy = proxy_gp_loss(T.Tensor(Z), prior.factor_rows(p_ids, q_ids), prior.alpha_tensor(),
                                  coeffs, rows, N)
            loss = T.mul(proxy, gw)
            if objective.mode == "eq8":
                loss = T.add(loss, T.mul(objective.recon_weight(), sq_value))
            loss.backward()
        noise = objective.noise_term(N)
        if noise is not None:
            noise.backward()

    grads = {}
    for name, p in params.items():
        if p.grad is None:
            continue
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
        grads[name] = p.grad
    gp_term = coeffs.f0 + 0.5 * N * L * LOG_2PI
    breakdown = objective.breakdown(sq_value, gp_term, reg_value, N)
    return StepResult(grads, breakdown, coeffs, Z)
