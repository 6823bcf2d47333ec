"""Losses, lambda / sigma_y^2 selection, Adam and the phase schedules.

Schedules per model kind::

    vae, cvae      vae
    gppvae_dis     vae -> gp
    gppvae_joint   vae -> gp -> joint

``vae`` trains encoder and decoder with minibatches under an i.i.d.
N(0, I) latent prior.  ``gp`` freezes the networks and fits the GP
parameters; ``joint`` fits everything.  Both GP phases take one
full-data gradient step per epoch (see :mod:`gppvae.taylor`).  The
joint phase stops early on validation prediction MSE and restores its
best parameters, counting its starting point as a candidate.

Every epoch draws its noise from ``default_rng([seed, phase_code,
epoch])`` so a resumed run replays the exact same stream.  The GP-only
phase is the exception: it draws once from ``default_rng([seed,
phase_code])`` and reuses that draw in every epoch.
"""

import csv
import math
import os
import time
from dataclasses import dataclass

import numpy as np

from . import baselines
from . import tensor as T
from .kernels import FullRankViewCov, GPPrior, PeriodicSEKernel
from .lowrank import LOG_2PI
from .model import Model
from .objective import Objective
from .taylor import full_gradient_step

PHASE_CODES = {"vae": 0, "gp": 1, "joint": 2}
GP_KINDS = ("gppvae_joint", "gppvae_dis")
LOG_COLUMNS = ("epoch", "phase", "recon", "gp_term", "reg_term", "total", "sigma_y2", "wall_ms")


class NumericAbort(RuntimeError):
    """A non-finite loss or gradient; parameters were rolled back to the epoch start."""

    def __init__(self, phase, epoch, reason):
        super().__init__(f"numeric abort in phase {phase!r}, epoch {epoch}: {reason}")
        self.phase = phase
        self.epoch = epoch
        self.reason = reason


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Phase:
    name: str
    epochs: int
    lr: float
    groups: tuple

    @property
    def code(self):
        return PHASE_CODES[self.name]


def schedule(kind, cfg, skip_vae=False):
    phases = []
    if not skip_vae:
        phases.append(Phase("vae", cfg.epochs_vae, cfg.lr_vae, ("enc", "dec", "noise")))
    if kind in GP_KINDS:
        phases.append(Phase("gp", cfg.epochs_gp, cfg.lr_gp, ("gp", "noise")))
    if kind == "gppvae_joint":
        phases.append(Phase("joint", cfg.epochs_joint, cfg.lr_joint, ("enc", "dec", "gp", "noise")))
    phases = [p for p in phases if p.epochs > 0]
    if not phases:
        raise ValueError(f"empty schedule for model {kind!r}")
    return phases


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


class Adam:
    """Bias-corrected Adam over a dict of named parameter tensors."""

    def __init__(self, params, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr, self.b1, self.b2, self.eps = float(lr), b1, b2, eps
        self.t = 0
        self.m = {k: np.zeros(p.shape) for k, p in self.params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in self.params.items()}

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            g = np.asarray(g, dtype=np.float64)
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)

    def state_dict(self):
        return {"t": self.t, "lr": self.lr, "m": self.m, "v": self.v}

    def load_state_dict(self, state):
        self.t = int(state["t"])
        self.lr = float(state["lr"])
        for k in self.params:
            self.m[k] = np.array(state["m"][k], dtype=np.float64).reshape(self.params[k].shape)
            self.v[k] = np.array(state["v"][k], dtype=np.float64).reshape(self.params[k].shape)


# ---------------------------------------------------------------------------
# model construction
# ---------------------------------------------------------------------------


def build_view_kernel(cfg, dataset):
    if cfg.view_kernel == "periodic":
        return PeriodicSEKernel(dataset.angles, period=cfg.period)
    return FullRankViewCov(dataset.n_views)


def build_model(cfg, dataset):
    prior = None
    if cfg.model in GP_KINDS:
        prior = GPPrior(build_view_kernel(cfg, dataset), dataset.n_objects, cfg.object_dim,
                        alpha_raw=math.log(cfg.alpha_init), seed=cfg.seed + 3)
    model = Model.build(cfg.model, cfg.arch, dataset.channels, dataset.image_size, cfg.latent_dim,
                        prior=prior, angles=dataset.angles, dtype=np.dtype(cfg.dtype), seed=cfg.seed)
    objective = Objective(cfg.loss_mode, cfg.latent_dim, model.pixels, cfg.lam, cfg.sigma_y2)
    return model, objective


def param_groups(model, objective):
    groups = model.groups()
    groups["noise"] = objective.named_parameters()
    return groups


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def exact_gp_term(Z, V, alpha):
    """Dense ``-log N(Z | 0, V V^T + alpha I)`` over the latent columns, as a graph."""
    N, L = Z.shape
    K = T.add(T.matmul(V, T.transpose(V)), T.mul(alpha, T.Tensor(np.eye(N))))
    quad = T.mul(T.tsum(T.mul(Z, T.spd_solve(K, Z))), 0.5)
    return T.add(T.add(quad, T.mul(T.spd_logdet(K), 0.5 * L)), 0.5 * N * L * LOG_2PI)


def iid_prior_term(z):
    """``-log N(z | 0, I)`` summed over rows."""
    n, L = z.shape
    return T.add(T.mul(T.tsum(T.square(z)), 0.5), 0.5 * n * L * LOG_2PI)


def loss(model, objective, Y, p_ids, q_ids, eps):
    """Loss of one batch built as a single graph, with the exact GP term.

    For GP models the batch is the whole GP (the dense N x N covariance is
    formed, so this is meant for small N and for reference checks).
    Returns ``(total, breakdown)``.
    """
    N = len(Y)
    cond_q = q_ids if model.kind == "cvae" else None
    mu, lv, z = model.sample(np.asarray(Y, dtype=model.dtype), eps, cond_q)
    yhat = model.decode(z, cond_q)
    sq = T.tsum(T.square(T.sub(T.Tensor(np.asarray(Y, dtype=model.dtype).reshape(yhat.shape)), yhat)))
    reg = T.mul(T.tsum(lv), -0.5)
    if model.prior is not None and model.kind in GP_KINDS:
        z64 = T.mul(z, T.Tensor(np.ones((), dtype=np.float64)))
        gp = exact_gp_term(z64, model.prior.factor_rows(p_ids, q_ids), model.prior.alpha_tensor())
    else:
        gp = iid_prior_term(z)
    for value, term in ((sq, "reconstruction term"), (gp, "GP term"), (reg, "regularization term")):
        if not np.all(np.isfinite(value.data)):
            raise FloatingPointError(f"non-finite value in {term}")
    total = T.add(T.mul(sq, objective.recon_weight()), T.mul(T.add(gp, reg), objective.prior_weight))
    noise = objective.noise_term(N)
    if noise is not None:
        total = T.add(total, noise)
    bd = objective.breakdown(float(sq.data), float(gp.data), float(reg.data), N)
    return total, bd


def estimate_sigma_y(model, Y, q_ids=None, batch_size=256):
    """Mean squared residual ``(y - g(mu))^2`` over samples and pixels."""
    if len(Y) == 0:
        raise ValueError("cannot estimate sigma_y^2 from an empty set")
    cond = q_ids if model.kind == "cvae" else None
    mu = model.encode_means(Y, batch_size, q_ids=cond)
    pred = model.decode_numpy(mu, batch_size, q_ids=cond)
    diff = pred.reshape(len(Y), -1).astype(np.float64) - np.asarray(Y, dtype=np.float64).reshape(len(Y), -1)
    return float(np.mean(diff * diff))


def validation_elbo(model, Y, sigma_y2, q_ids=None, batch_size=256):
    """Per-sample ELBO with the likelihood evaluated at ``g(mu)``.

    ``-K/2 log(2 pi sigma^2) - ||y - g(mu)||^2 / (2 sigma^2) - KL(q || N(0, I))``.
    """
    cond = q_ids if model.kind == "cvae" else None
    K = model.pixels
    total = 0.0
    with T.no_grad():
        for s in range(0, len(Y), batch_size):
            yb = np.asarray(Y[s:s + batch_size], dtype=model.dtype)
            qb = None if cond is None else np.asarray(cond)[s:s + batch_size]
            mu, lv = model.encode(yb, qb)
            pred = model.decode(mu, qb).data.reshape(len(yb), -1).astype(np.float64)
            sq = np.sum((pred - yb.reshape(len(yb), -1)) ** 2, axis=1)
            m, l = mu.data.astype(np.float64), lv.data.astype(np.float64)
            kl = 0.5 * np.sum(m * m + np.exp(l) - 1.0 - l, axis=1)
            total += float(np.sum(-0.5 * K * np.log(2 * np.pi * sigma_y2) - sq / (2 * sigma_y2) - kl))
    return total / len(Y)


def validation_query(dataset, split):
    """Validation samples usable for prediction: outside the held-out view, object seen in training."""
    val = split.val[dataset.view_ids[split.val] != split.held_out_view]
    return val[np.isin(dataset.object_ids[val], dataset.object_ids[split.train])]


def validation_mse(model, dataset, split, query=None):
    query = validation_query(dataset, split) if query is None else query
    return baselines.eval_mse(baselines.predict(model, dataset, split, query))["mean"]


def select_lambda(grid, dataset, split, cfg, criterion="elbo", log_path=None):
    """Pick lambda by training one VAE (or CVAE) per grid value.

    ``criterion="elbo"`` maximises validation ELBO (sigma_y^2 estimated on
    validation), ``"prediction"`` minimises validation prediction MSE.
    Ties go to the smaller lambda (first occurrence).  Runs that hit a
    numeric abort are recorded as failed and excluded.
    Returns ``(lam, records)``.
    """
    grid = [float(g) for g in grid]
    if not grid:
        raise ValueError("lambda grid is empty")
    if any(not g > 0 for g in grid):
        raise ValueError("lambda values must be positive")
    kind = "cvae" if cfg.model == "cvae" else "vae"
    val = split.val
    records = []
    for lam in grid:
        sub_cfg = cfg.replace(model=kind, lam=lam, lambda_grid=[])
        model, objective = build_model(sub_cfg, dataset)
        rec = {"lam": lam, "status": "ok", "sigma_y2": float("nan"), "val_elbo": float("nan"),
               "val_mse": float("nan"), "score": float("nan")}
        try:
            Trainer(model, objective, dataset, split, sub_cfg, schedule(kind, sub_cfg)).run()
            s2 = estimate_sigma_y(model, dataset.images[val], dataset.view_ids[val])
            rec["sigma_y2"] = s2
            rec["val_elbo"] = validation_elbo(model, dataset.images[val], s2, dataset.view_ids[val])
            rec["val_mse"] = validation_mse(model, dataset, split)
            rec["score"] = rec["val_elbo"] if criterion == "elbo" else -rec["val_mse"]
            if not np.isfinite(rec["score"]):
                raise FloatingPointError("non-finite selection score")
        except (NumericAbort, FloatingPointError) as exc:
            rec["status"] = f"failed: {exc}"
        records.append(rec)
    ok = [r for r in records if r["status"] == "ok"]
    if not ok:
        raise NumericAbort("lambda-selection", 0, "every grid point failed")
    best = max(r["score"] for r in ok)
    lam = min(r["lam"] for r in ok if r["score"] == best)
    if log_path:
        with open(log_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(records[0]))
            w.writeheader()
            for r in records:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return lam, records


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------


def _copy_params(params):
    return {k: p.data.copy() for k, p in params.items()}


def _restore_params(params, saved):
    for k, p in params.items():
        p.data[...] = saved[k]


class Trainer:
    """Runs a phase schedule with checkpointable state.

    The cursor ``(phase_index, epoch)`` names the next epoch to run.
    ``on_checkpoint(trainer)`` is called every ``cfg.checkpoint_every``
    epochs, at phase boundaries and at the end.
    """

    def __init__(self, model, objective, dataset, split, cfg, phases, log_path=None, on_checkpoint=None):
        self.model = model
        self.objective = objective
        self.dataset = dataset
        self.split = split
        self.cfg = cfg
        self.phases = list(phases)
        self.log_path = log_path
        self.on_checkpoint = on_checkpoint
        self.phase_index = 0
        self.epoch = 0
        self.adam = None
        self.rows = []
        self.early = {"best": None, "bad": 0, "best_epoch": -1, "history": []}
        self.best_params = None
        tr = split.train
        self.Y = dataset.images[tr]
        self.p_ids = dataset.object_ids[tr]
        self.q_ids = dataset.view_ids[tr]
        self._val_query = validation_query(dataset, split)

    # -- parameters ---------------------------------------------------------

    def all_params(self):
        out = {}
        for g in param_groups(self.model, self.objective).values():
            out.update(g)
        return out

    def phase_params(self, phase):
        groups = param_groups(self.model, self.objective)
        out = {}
        for g in phase.groups:
            out.update(groups.get(g, {}))
        return out

    def _ensure_adam(self):
        phase = self.phases[self.phase_index]
        if self.adam is None:
            self.adam = Adam(self.phase_params(phase), lr=phase.lr)

    # -- state --------------------------------------------------------------

    @property
    def done(self):
        return self.phase_index >= len(self.phases)

    def state(self):
        return {"phase_index": self.phase_index, "epoch": self.epoch,
                "phases": [p.name for p in self.phases],
                "adam": None if self.adam is None else self.adam.state_dict(),
                "early": dict(self.early), "best_params": self.best_params,
                "sigma_y2": self.objective.sigma_y2}

    def load_state(self, st):
        names = [p.name for p in self.phases]
        if st["phases"] != names:
            raise ValueError(f"checkpoint schedule {st['phases']} does not match {names}")
        self.phase_index, self.epoch = int(st["phase_index"]), int(st["epoch"])
        self.early = dict(st["early"])
        self.best_params = st.get("best_params")
        self.adam = None
        if st.get("adam") is not None and not self.done:
            self._ensure_adam()
            self.adam.load_state_dict(st["adam"])
        if self.log_path and os.path.exists(self.log_path):
            self.rows = self._read_log_prefix()

    def _read_log_prefix(self):
        order = {p.name: i for i, p in enumerate(self.phases)}
        keep = []
        with open(self.log_path) as fh:
            for r in csv.DictReader(fh):
                key = (order.get(r["phase"], len(self.phases)), int(r["epoch"]))
                if key < (self.phase_index, self.epoch):
                    keep.append([r[c] for c in LOG_COLUMNS])
        return keep

    def _write_log(self):
        if not self.log_path:
            return
        with open(self.log_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_COLUMNS)
            w.writerows(self.rows)

    # -- epochs -------------------------------------------------------------

    def _rng(self, phase):
        # the GP-only phase reuses one noise draw: with the networks frozen
        # this turns it into plain descent on a fixed objective
        if phase.name == "gp":
            return np.random.default_rng([self.cfg.seed, phase.code])
        return np.random.default_rng([self.cfg.seed, phase.code, self.epoch])

    def _vae_epoch(self, phase, rng):
        model, obj = self.model, self.objective
        n, L = len(self.Y), model.latent_dim
        perm = rng.permutation(n)
        eps = rng.standard_normal((n, L))
        sq_sum = gp_sum = reg_sum = 0.0
        for s in range(0, n, self.cfg.batch_size):
            rows = perm[s:s + self.cfg.batch_size]
            for p in self.adam.params.values():
                p.zero_grad()
            cond = self.q_ids[rows] if model.kind == "cvae" else None
            mu, lv, z = model.sample(self.Y[rows].astype(model.dtype, copy=False), eps[s:s + len(rows)], cond)
            yhat = model.decode(z, cond)
            sq = T.tsum(T.square(T.sub(T.Tensor(self.Y[rows].reshape(yhat.shape)), yhat)))
            gp = iid_prior_term(z)
            reg = T.mul(T.tsum(lv), -0.5)
            total = T.add(T.mul(sq, obj.recon_weight()), T.mul(T.add(gp, reg), obj.prior_weight))
            noise = obj.noise_term(len(rows))
            if noise is not None:
                total = T.add(total, noise)
            if not np.isfinite(total.data):
                raise FloatingPointError("non-finite minibatch loss")
            total.backward()
            grads = {k: p.grad for k, p in self.adam.params.items() if p.grad is not None}
            for k, g in grads.items():
                if not np.all(np.isfinite(g)):
                    raise FloatingPointError(f"non-finite gradient for parameter {k}")
            sq_sum += float(sq.data)
            gp_sum += float(gp.data)
            reg_sum += float(reg.data)
            self.adam.step(grads)
        return obj.breakdown(sq_sum, gp_sum, reg_sum, n)

    def _full_epoch(self, phase, rng):
        res = full_gradient_step(self.model, self.Y, self.p_ids, self.q_ids, self.objective,
                                 self.cfg.batch_size, rng=rng, train_networks=phase.name == "joint")
        if not np.isfinite(res.breakdown.total):
            raise FloatingPointError("non-finite total loss")
        self.adam.step({k: g for k, g in res.grads.items() if k in self.adam.params})
        return res.breakdown

    def _early_stop_baseline(self):
        """Score the parameters the joint phase starts from (``best_epoch = -1``)."""
        if self.early["best"] is None and len(self._val_query):
            self.early.update(best=validation_mse(self.model, self.dataset, self.split, self._val_query),
                              bad=0, best_epoch=-1)
            self.best_params = _copy_params(self.all_params())

    def _early_stop(self, phase):
        """Track validation MSE; return True when patience is exhausted."""
        if not len(self._val_query):
            return False
        mse = validation_mse(self.model, self.dataset, self.split, self._val_query)
        self.early["history"].append(mse)
        best = self.early["best"]
        if best is None or mse < best:
            self.early.update(best=mse, bad=0, best_epoch=self.epoch)
            self.best_params = _copy_params(self.all_params())
        else:
            self.early["bad"] += 1
        return self.early["bad"] >= self.cfg.patience

    def _end_phase(self, phase):
        if phase.name == "vae" and self.objective.mode == "si_lambda" and len(self.split.val):
            val = self.split.val
            s2 = estimate_sigma_y(self.model, self.dataset.images[val], self.dataset.view_ids[val])
            if s2 > 0:
                self.objective.sigma_raw.data[...] = np.log(s2)
        if phase.name == "joint" and self.best_params is not None:
            _restore_params(self.all_params(), self.best_params)
        self.best_params = None
        self.phase_index += 1
        self.epoch = 0
        self.adam = None

    def run_epoch(self):
        phase = self.phases[self.phase_index]
        self._ensure_adam()
        if phase.name == "joint" and self.epoch == 0:
            self._early_stop_baseline()
        params = self.all_params()
        saved = _copy_params(params)
        saved_adam = {"t": self.adam.t, "lr": self.adam.lr,
                      "m": {k: v.copy() for k, v in self.adam.m.items()},
                      "v": {k: v.copy() for k, v in self.adam.v.items()}}
        t0 = time.perf_counter()
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                rng = self._rng(phase)
                bd = self._vae_epoch(phase, rng) if phase.name == "vae" else self._full_epoch(phase, rng)
        except FloatingPointError as exc:
            _restore_params(params, saved)
            self.adam.load_state_dict(saved_adam)
            raise NumericAbort(phase.name, self.epoch, str(exc)) from exc
        wall = (time.perf_counter() - t0) * 1000.0
        self.rows.append([self.epoch, phase.name, repr(bd.recon), repr(bd.gp_term), repr(bd.reg_term),
                          repr(bd.total), repr(bd.sigma_y2), f"{wall:.1f}"])
        stop = phase.name == "joint" and self._early_stop(phase)
        self.epoch += 1
        if stop or self.epoch >= phase.epochs:
            self._end_phase(phase)
            return True
        return False

    def run(self, stop_after=None):
        """Run until done or until ``stop_after`` epochs have executed; returns ``done``."""
        ran = 0
        every = max(1, int(self.cfg.checkpoint_every))
        while not self.done and (stop_after is None or ran < stop_after):
            boundary = self.run_epoch()
            ran += 1
            self._write_log()
            if self.on_checkpoint and (boundary or ran % every == 0):
                self.on_checkpoint(self)
        self._write_log()
        if self.on_checkpoint:
            self.on_checkpoint(self)
        return self.done
