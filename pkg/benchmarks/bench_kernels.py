"""Compare the numba and numpy backends of the hot kernels.

Run from the repository root::

    python3 benchmarks/bench_kernels.py --batch 128 --repeat 5

Shapes follow the reference convolutional encoder on 28 x 28 images.
Both backends are imported in the same process, so numba must be
installed (``GPPVAE_DISABLE_NUMBA`` is ignored here).  Times are the
median of ``--repeat`` warm runs.
"""

import argparse
import statistics
import time

import numpy as np

from gppvae import _accel


def median_ms(fn, repeat):
    fn()  # warm-up (includes JIT compilation for numba)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def cases(batch, rng):
    x1 = rng.standard_normal((batch, 1, 28, 28))
    w1 = rng.standard_normal((8, 1, 3, 3))
    d1 = rng.standard_normal((batch, 8, 14, 14))
    x2 = rng.standard_normal((batch, 8, 14, 14))
    w2 = rng.standard_normal((16, 8, 3, 3))
    d2 = rng.standard_normal((batch, 16, 7, 7))
    img = rng.uniform(size=(28, 28))
    return [
        ("conv 1->8, 28px", "conv2d", (x1, w1, 2, 1), np.empty_like(d1)),
        ("conv 8->16, 14px", "conv2d", (x2, w2, 2, 1), np.empty_like(d2)),
        ("grad input 8->16", "conv2d_grad_input", (d2, w2, 2, 1), np.empty_like(x2)),
        ("grad weight 8->16", "conv2d_grad_weight", (x2, d2, 2, 1), np.empty_like(w2)),
        ("rotate 28px", "rotate_bilinear", (img, 0.3), np.empty_like(img)),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=128)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not available; nothing to compare against")
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<20} {'numpy ms':>10} {'numba ms':>10} {'speed-up':>9} {'max diff':>10}")
    for label, name, inputs, out in cases(args.batch, rng):
        np_fn, nb_fn = getattr(_accel, "np_" + name), getattr(_accel, "nb_" + name)
        out_np, out_nb = out.copy(), out.copy()
        t_np = median_ms(lambda: np_fn(*inputs, out_np), args.repeat)
        t_nb = median_ms(lambda: nb_fn(*inputs, out_nb), args.repeat)
        diff = float(np.max(np.abs(out_np - out_nb)))
        print(f"{label:<20} {t_np:>10.2f} {t_nb:>10.2f} {t_np / t_nb:>8.1f}x {diff:>10.1e}")


if __name__ == "__main__":
    main()
