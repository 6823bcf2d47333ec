"""``gppvae`` command-line interface.

Subcommands: ``gen-data``, ``train``, ``predict``, ``eval``,
``inspect-kernel``.  Exit codes: 0 success, 2 usage error, 3 numeric
abort, 4 incompatible checkpoint or data.
"""

import argparse
import csv
import json
import os
import sys

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_INCOMPATIBLE = 0, 2, 3, 4
MODEL_CHOICES = ("vae", "gppvae-joint", "gppvae-dis", "cvae")


class UsageError(Exception):
    pass


def resolve_threads(flag):
    if flag:
        return int(flag)
    env = os.environ.get("GPPVAE_THREADS", "").strip()
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"GPPVAE_THREADS must be an integer, got {env!r}") from None
    return 0


def apply_threads(n):
    """Cap numba and BLAS worker threads; ``0`` keeps the library defaults."""
    if n <= 0:
        return None
    from threadpoolctl import threadpool_limits

    from . import _accel
    if _accel.HAVE_NUMBA and _accel.BACKEND == "numba":
        import numba
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    return threadpool_limits(limits=n)


def checkpoint_dir(path):
    """Accept a run directory or a checkpoint directory."""
    nested = os.path.join(path, "checkpoint")
    return nested if os.path.isfile(os.path.join(nested, "meta.json")) else path


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args):
    from . import datagen
    ds = datagen.generate_glyphs(args.objects, args.views, args.size, args.seed)
    spec = datagen.SplitSpec(args.val_fraction, args.dropout, args.held_out_view,
                             args.seed if args.split_seed is None else args.split_seed)
    sp = datagen.split(ds, spec)
    manifest = datagen.save_dataset(args.out, ds, sp)
    print(f"wrote {manifest['n_samples']} samples ({len(sp.train)} train, {len(sp.val)} val, "
          f"{len(sp.test)} test) to {args.out}")
    return EXIT_OK


def _load_data(path):
    from . import datagen
    if not os.path.isfile(os.path.join(path, "manifest.json")):
        raise UsageError(f"no dataset at {path!r}")
    ds, sp, manifest = datagen.load_dataset(path)
    if sp is None:
        sp = datagen.split(ds)
    return ds, sp, manifest


def _train_config(args):
    from .config import RunConfig
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    return cfg.replace(model=args.model, seed=args.seed, threads=args.threads, lam=args.lam,
                       data=args.data, out=args.out, epochs_vae=args.epochs_vae, epochs_gp=args.epochs_gp,
                       epochs_joint=args.epochs_joint, checkpoint_every=args.checkpoint_every)


def cmd_train(args):
    from . import checkpoint as ck
    from . import datagen, training

    ckpt_path = os.path.join(args.out, "checkpoint")
    log_path = os.path.join(args.out, "train_log.csv")
    if args.resume:
        saved = ck.load_checkpoint(ckpt_path)
        cfg = saved.config
        if cfg.data and args.data and os.path.abspath(cfg.data) != os.path.abspath(args.data):
            raise UsageError("--data differs from the run being resumed")
        ds, sp, manifest = _load_data(cfg.data or args.data)
        ck.check_compatible(saved, ds)
        model, objective = saved.model, saved.objective
        state = saved.trainer_state()
        phases = training.schedule(cfg.model, cfg, skip_vae="vae" not in state["phases"])
    else:
        if not args.data:
            raise UsageError("--data is required")
        cfg = _train_config(args)
        ds, sp, manifest = _load_data(cfg.data)
        if cfg.lambda_grid:
            os.makedirs(args.out, exist_ok=True)
            lam, _ = training.select_lambda(cfg.lambda_grid, ds, sp, cfg, cfg.lambda_criterion,
                                            os.path.join(args.out, "lambda_selection.csv"))
            cfg = cfg.replace(lam=lam)
        model, objective = training.build_model(cfg, ds)
        skip_vae = False
        if args.init_from:
            src = ck.load_checkpoint(checkpoint_dir(args.init_from))
            ck.check_compatible(src, ds)
            ck.copy_networks(src.model, model)
            if objective.mode == "si_lambda":
                objective.sigma_raw.data[...] = np.log(src.objective.sigma_y2)
            skip_vae = True
        phases = training.schedule(cfg.model, cfg, skip_vae)
        state = None
        if os.path.exists(log_path):
            os.remove(log_path)
    apply_threads(resolve_threads(cfg.threads))
    os.makedirs(args.out, exist_ok=True)
    extra = {"dataset": {"manifest_sha256": datagen.manifest_hash(cfg.data or args.data)}}

    def save(tr):
        ck.save_checkpoint(ckpt_path, model, objective, cfg, tr.state(), extra)

    trainer = training.Trainer(model, objective, ds, sp, cfg, phases, log_path, on_checkpoint=save)
    if state is not None:
        trainer.load_state(state)
    try:
        done = trainer.run(stop_after=args.stop_after_epochs)
    except training.NumericAbort as exc:
        trainer._write_log()
        save(trainer)
        print(f"error: {exc}; last good checkpoint kept at {ckpt_path}", file=sys.stderr)
        return EXIT_NUMERIC
    print(("finished" if done else "paused") + f"; checkpoint at {ckpt_path}")
    return EXIT_OK


def cmd_predict(args):
    from . import baselines
    from . import checkpoint as ck
    saved = ck.load_checkpoint(checkpoint_dir(args.checkpoint))
    ds, sp, _ = _load_data(args.data)
    ck.check_compatible(saved, ds)
    query = {"test": sp.test, "val": sp.val}[args.split]
    rng = np.random.default_rng(args.seed)
    pred = baselines.predict(saved.model, ds, sp, query, mode=args.mode, n_samples=args.samples, rng=rng)
    baselines.save_predictions(args.out, pred)
    with open(os.path.join(args.out, "prediction.json"), "w") as fh:
        json.dump({"method": pred.method, "n": len(pred.indices), "split": args.split, "mode": args.mode,
                   "skipped": len(pred.skipped)}, fh, indent=1, sort_keys=True)
    s = baselines.eval_mse(pred)
    print(f"{pred.method}: mse {s['mean']:.6f} +- {s['std_error']:.6f} (n={s['n']})")
    return EXIT_OK


def cmd_eval(args):
    from . import baselines, tensorio
    rows = []
    for pdir in args.pred:
        pred_imgs = tensorio.load(os.path.join(pdir, "predictions.gpt"))
        with open(os.path.join(pdir, "per_sample_mse.csv")) as fh:
            idx = np.array([int(r["index"]) for r in csv.DictReader(fh)], dtype=np.int64)
        if args.truth:
            truth = tensorio.load(args.truth)
        else:
            ds, _, _ = _load_data(args.data)
            truth = ds.images[idx]
        if truth.shape != pred_imgs.shape:
            raise ValueError(f"predictions {pred_imgs.shape} and truth {truth.shape} differ in shape")
        method = os.path.basename(os.path.normpath(pdir))
        info = os.path.join(pdir, "prediction.json")
        if os.path.isfile(info):
            with open(info) as fh:
                method = json.load(fh).get("method", method)
        rows.append((method, baselines.eval_mse(baselines.per_sample_mse(pred_imgs, truth))))
    baselines.write_summary(args.out, rows)
    for method, s in rows:
        print(f"{method}: mse {s['mean']:.6f} +- {s['std_error']:.6f} (n={s['n']})")
    return EXIT_OK


def _write_matrix(path, M):
    np.savetxt(path, np.asarray(M, dtype=np.float64), delimiter=",", fmt="%.17g")


def cmd_inspect_kernel(args):
    from . import checkpoint as ck
    saved = ck.load_checkpoint(checkpoint_dir(args.checkpoint))
    prior = saved.model.prior
    if prior is None:
        raise ck.CheckpointError(f"model kind {saved.model.kind!r} has no GP prior")
    os.makedirs(args.out, exist_ok=True)
    _write_matrix(os.path.join(args.out, "view_cov.csv"), prior.view_covariance())
    _write_matrix(os.path.join(args.out, "object_cov.csv"), prior.object_covariance())
    print(f"alpha = {prior.alpha:.6g}; wrote view_cov.csv and object_cov.csv to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser():
    ap = argparse.ArgumentParser(prog="gppvae", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a rotated-glyph dataset and its split")
    g.add_argument("--objects", type=int, default=400)
    g.add_argument("--views", type=int, default=16)
    g.add_argument("--size", type=int, default=28)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--val-fraction", type=float, default=0.1)
    g.add_argument("--dropout", type=float, default=0.25)
    g.add_argument("--held-out-view", type=int, default=None)
    g.add_argument("--split-seed", type=int, default=None)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model and write a checkpoint and per-epoch log")
    t.add_argument("--model", choices=MODEL_CHOICES, default=None)
    t.add_argument("--config", default=None, help="JSON run configuration; flags override it")
    t.add_argument("--data", default=None)
    t.add_argument("--out", required=True, help="run directory (checkpoint/ and train_log.csv)")
    t.add_argument("--init-from", default=None, help="take encoder/decoder from this run and skip the VAE phase")
    t.add_argument("--resume", action="store_true", help="continue the run in --out from its cursor")
    t.add_argument("--threads", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--lam", type=float, default=None)
    t.add_argument("--epochs-vae", type=int, default=None)
    t.add_argument("--epochs-gp", type=int, default=None)
    t.add_argument("--epochs-joint", type=int, default=None)
    t.add_argument("--checkpoint-every", type=int, default=None)
    t.add_argument("--stop-after-epochs", type=int, default=None, help="pause after this many epochs")
    t.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict held-out images from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("test", "val"), default="test")
    p.add_argument("--mode", choices=("mean", "mc"), default="mean")
    p.add_argument("--samples", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", help="summarise prediction directories into summary.csv")
    e.add_argument("--pred", required=True, nargs="+")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--data")
    src.add_argument("--truth", help=".gpt file of ground-truth images aligned with the predictions")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    k = sub.add_parser("inspect-kernel", help="write learned view and object covariances as CSV")
    k.add_argument("--checkpoint", required=True)
    k.add_argument("--out", required=True)
    k.set_defaults(func=cmd_inspect_kernel)
    return ap


def main(argv=None):
    from .checkpoint import CheckpointError
    from .training import NumericAbort

    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except CheckpointError as exc:
        print(f"error: incompatible checkpoint: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except NumericAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
