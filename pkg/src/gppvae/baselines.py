"""Out-of-sample image prediction for all methods, and the MSE protocol.

* GPPVAE (joint and disjoint): encode training images, take the latent
  GP posterior mean at the query's (object, view), decode.
* LIVAE: interpolate a VAE's posterior means between the two observed
  views of the object that flank the target angle (circularly).
* CVAE: average the object's conditional posterior means over its
  training views and decode with the target view's features.
"""

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensorio
from .kernels import build_factor
from .lowrank import CapacitanceFactor, gp_predict_latent
from . import tensor as T

TWO_PI = 2.0 * np.pi


@dataclass
class PredictionSet:
    predicted: np.ndarray
    truth: np.ndarray
    indices: np.ndarray
    object_ids: np.ndarray
    view_ids: np.ndarray
    method: str = ""
    skipped: list = field(default_factory=list)

    def __post_init__(self):
        if self.predicted.shape != self.truth.shape:
            raise ValueError(f"prediction shape {self.predicted.shape} != truth {self.truth.shape}")
        self.per_sample_mse = per_sample_mse(self.predicted, self.truth)


def per_sample_mse(pred, truth):
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    diff = (pred - truth).reshape(len(pred), -1)
    return np.mean(diff * diff, axis=1)


def eval_mse(pred):
    """Mean of per-sample MSE and its standard error ``std / sqrt(n)``."""
    mse = pred.per_sample_mse if isinstance(pred, PredictionSet) else np.asarray(pred, dtype=np.float64)
    n = len(mse)
    if n == 0:
        raise ValueError("cannot evaluate an empty prediction set")
    se = float(np.std(mse, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return {"mean": float(np.mean(mse)), "std_error": se, "n": n}


def _queries(dataset, split, query):
    return np.asarray(split.test if query is None else query, dtype=np.int64)


def _finish(model, dataset, q_idx, Zq, method, skipped, keep, cond_views=None):
    q_idx = q_idx[keep]
    Zq = Zq[keep]
    pred = model.decode_numpy(Zq, q_ids=cond_views[keep] if cond_views is not None else None)
    pred = pred.reshape(dataset.images[q_idx].shape)
    return PredictionSet(pred.astype(np.float64), dataset.images[q_idx].astype(np.float64), q_idx,
                         dataset.object_ids[q_idx], dataset.view_ids[q_idx], method, skipped)


# ---------------------------------------------------------------------------
# GPPVAE
# ---------------------------------------------------------------------------


def gp_latent_predictions(model, dataset, split, query=None, mode="mean", n_samples=10, rng=None,
                          Z_train=None):
    prior = model.prior
    tr = split.train
    q_idx = _queries(dataset, split, query)
    if Z_train is None:
        Z_train = model.encode_means(dataset.images[tr])
    lr = prior.lowrank(dataset.object_ids[tr], dataset.view_ids[tr])
    with T.no_grad():
        L_view = prior.view_kernel.factor().data
    v_star = build_factor(prior.X.data, L_view, dataset.object_ids[q_idx], dataset.view_ids[q_idx])
    fac = CapacitanceFactor(lr.V, lr.alpha)
    if mode == "mean":
        return gp_predict_latent(v_star, lr.V, lr.alpha, Z_train, factor=fac)
    if mode != "mc":
        raise ValueError(f"unknown prediction mode {mode!r}")
    rng = rng or np.random.default_rng(0)
    mus, lvs = [], []
    with T.no_grad():
        for s in range(0, len(tr), 256):
            mu, lv = model.encode(dataset.images[tr[s:s + 256]].astype(model.dtype))
            mus.append(mu.data)
            lvs.append(lv.data)
    mu, sd = np.concatenate(mus), np.exp(0.5 * np.concatenate(lvs))
    acc = 0.0
    for _ in range(n_samples):
        acc = acc + gp_predict_latent(v_star, lr.V, lr.alpha, mu + sd * rng.standard_normal(mu.shape), factor=fac)
    return acc / n_samples


def gppvae_predict(model, dataset, split, query=None, mode="mean", n_samples=10, rng=None, method="gppvae"):
    q_idx = _queries(dataset, split, query)
    Zq = gp_latent_predictions(model, dataset, split, q_idx, mode, n_samples, rng)
    return _finish(model, dataset, q_idx, Zq, method, [], np.ones(len(q_idx), dtype=bool))


# ---------------------------------------------------------------------------
# LIVAE
# ---------------------------------------------------------------------------


def flanking_weights(observed_angles, target):
    """Indices and weights of the two observed angles flanking ``target``.

    Angles are circular.  Returns ``(i_next, i_prev, w_next, w_prev)``;
    the nearer view gets the larger weight and the weights sum to one.
    """
    ang = np.asarray(observed_angles, dtype=np.float64)
    offs = np.mod(ang - target, TWO_PI)
    exact = np.flatnonzero(np.isclose(offs, 0.0) | np.isclose(offs, TWO_PI))
    if exact.size:
        return int(exact[0]), int(exact[0]), 1.0, 0.0
    if len(np.unique(np.round(offs, 12))) < 2:
        raise ValueError("need at least two distinct observed views to interpolate")
    i_next = int(np.argmin(offs))
    i_prev = int(np.argmax(offs))
    d_next, d_prev = offs[i_next], TWO_PI - offs[i_prev]
    w_next = d_prev / (d_next + d_prev)
    return i_next, i_prev, float(w_next), float(1.0 - w_next)


def livae_latents(model, dataset, split, query=None):
    tr = split.train
    q_idx = _queries(dataset, split, query)
    means = model.encode_means(dataset.images[tr])
    angles = dataset.angles
    Zq = np.zeros((len(q_idx), model.latent_dim))
    keep = np.ones(len(q_idx), dtype=bool)
    skipped = []
    by_obj = {}
    for j, n in enumerate(tr):
        by_obj.setdefault(int(dataset.object_ids[n]), []).append(j)
    for k, n in enumerate(q_idx):
        p = int(dataset.object_ids[n])
        rows = by_obj.get(p, [])
        try:
            if len(rows) < 2:
                raise ValueError(f"object {p} has {len(rows)} training view(s); need 2")
            obs = angles[dataset.view_ids[tr[rows]]]
            i1, i2, w1, w2 = flanking_weights(obs, angles[dataset.view_ids[n]])
        except ValueError as exc:
            keep[k] = False
            skipped.append((int(n), str(exc)))
            continue
        Zq[k] = w1 * means[rows[i1]] + w2 * means[rows[i2]]
    return q_idx, Zq, keep, skipped


def livae_predict(model, dataset, split, query=None):
    q_idx, Zq, keep, skipped = livae_latents(model, dataset, split, query)
    return _finish(model, dataset, q_idx, Zq, "livae", skipped, keep)


# ---------------------------------------------------------------------------
# CVAE
# ---------------------------------------------------------------------------


def cvae_latents(model, dataset, split, query=None):
    tr = split.train
    q_idx = _queries(dataset, split, query)
    means = model.encode_means(dataset.images[tr], q_ids=dataset.view_ids[tr])
    Zq = np.zeros((len(q_idx), model.latent_dim))
    obj = dataset.object_ids[tr]
    for k, n in enumerate(q_idx):
        p = dataset.object_ids[n]
        rows = obj == p
        if not np.any(rows):
            raise ValueError(f"object {int(p)} has no training images")
        Zq[k] = means[rows].mean(axis=0)
    return q_idx, Zq


def cvae_predict(model, dataset, split, query=None):
    q_idx, Zq = cvae_latents(model, dataset, split, query)
    keep = np.ones(len(q_idx), dtype=bool)
    return _finish(model, dataset, q_idx, Zq, "cvae", [], keep, cond_views=dataset.view_ids[q_idx])


def predict(model, dataset, split, query=None, mode="mean", n_samples=10, rng=None):
    """Dispatch on the model kind (a plain VAE predicts via LIVAE)."""
    if model.kind in ("gppvae_joint", "gppvae_dis"):
        return gppvae_predict(model, dataset, split, query, mode, n_samples, rng, method=model.kind)
    if model.kind == "cvae":
        return cvae_predict(model, dataset, split, query)
    return livae_predict(model, dataset, split, query)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def save_predictions(path, pred):
    os.makedirs(path, exist_ok=True)
    tensorio.save(os.path.join(path, "predictions.gpt"), pred.predicted)
    with open(os.path.join(path, "per_sample_mse.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "object_id", "view_id", "mse"])
        for i, p, q, m in zip(pred.indices, pred.object_ids, pred.view_ids, pred.per_sample_mse):
            w.writerow([int(i), int(p), int(q), repr(float(m))])
    if pred.skipped:
        with open(os.path.join(path, "skipped.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "reason"])
            w.writerows(pred.skipped)


def read_per_sample_mse(path):
    with open(os.path.join(path, "per_sample_mse.csv")) as fh:
        return np.array([float(r["mse"]) for r in csv.DictReader(fh)])


def write_summary(path, rows):
    """``rows``: iterable of (method, stats) with stats from :func:`eval_mse`."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "mean_mse", "std_error", "n"])
        for method, s in rows:
            w.writerow([method, repr(s["mean"]), repr(s["std_error"]), s["n"]])
