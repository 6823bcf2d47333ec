"""One instrumented training step at full scale; prints a JSON report.

Run in a fresh interpreter (the acceptance suite sets
GPPVAE_DISABLE_NUMBA=1 so every temporary is a numpy allocation that
tracemalloc can see).
"""

import json
import sys
import time

import numpy as np

from gppvae import _accel, datagen, memtrack, training
from gppvae.config import RunConfig
from gppvae.taylor import full_gradient_step


def main(batch_size=128):
    ds = datagen.generate_glyphs(400, 16, 28, 0)
    cfg = RunConfig(model="gppvae_joint", dtype="float64", period=2 * np.pi)
    model, objective = training.build_model(cfg, ds)
    Y = ds.images.astype(np.float64)
    eps = np.random.default_rng(0).standard_normal((ds.n_samples, model.latent_dim))
    H = model.prior.lowrank(ds.object_ids[:1], ds.view_ids[:1]).V.shape[1]
    t0 = time.perf_counter()
    with memtrack.probe() as probe:
        full_gradient_step(model, Y, ds.object_ids, ds.view_ids, objective, batch_size, eps=eps)
    report = {
        "backend": _accel.BACKEND, "N": ds.n_samples, "K": model.pixels, "L": model.latent_dim, "H": H,
        "batch_size": batch_size, "largest_bytes": probe.largest_bytes,
        "largest_label": probe.largest_label, "largest_shape": probe.largest_shape,
        "peak_bytes": probe.peak_bytes, "step_peaks": probe.step_peaks,
        "itemsize": 8, "seconds": time.perf_counter() - t0,
    }
    json.dump(report, sys.stdout)


if __name__ == "__main__":
    main()
