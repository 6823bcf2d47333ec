"""Checkpoint directories: named ``.gpt`` tensors plus ``meta.json``.

Layout::

    meta.json               format version, config, architecture, cursor
    param.<name>.gpt        model / GP / noise parameters
    adam.m.<name>.gpt       Adam moments of the active phase
    adam.v.<name>.gpt
    best.<name>.gpt         best-so-far parameters during early stopping

Files hold no timestamps, so identical runs produce identical bytes.
Writes go to a sibling temporary directory that replaces the old one
only once complete.
"""

import hashlib
import json
import os
import shutil
from dataclasses import dataclass

import numpy as np

from . import tensorio
from .config import RunConfig
from .kernels import FullRankViewCov, GPPrior, PeriodicSEKernel
from .model import Model
from .objective import Objective

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Missing, unreadable or incompatible checkpoint."""


@dataclass
class Checkpoint:
    model: Model
    objective: Objective
    config: RunConfig
    meta: dict
    tensors: dict

    def trainer_state(self):
        st = self.meta["state"]
        adam = None
        if st.get("adam") is not None:
            adam = {"t": st["adam"]["t"], "lr": st["adam"]["lr"],
                    "m": {k[7:]: v for k, v in self.tensors.items() if k.startswith("adam.m.")},
                    "v": {k[7:]: v for k, v in self.tensors.items() if k.startswith("adam.v.")}}
        best = {k[5:]: v for k, v in self.tensors.items() if k.startswith("best.")} or None
        return {"phase_index": st["phase_index"], "epoch": st["epoch"], "phases": st["phases"],
                "adam": adam, "early": st["early"], "best_params": best}


def _all_params(model, objective):
    out = dict(model.named_parameters())
    out.update(objective.named_parameters())
    return out


def save_checkpoint(path, model, objective, cfg, state=None, extra=None):
    path = os.path.abspath(path)
    tmp = path + ".tmp"
    if os.path.exists(tmp):
        shutil.rmtree(tmp)
    os.makedirs(tmp)
    params = _all_params(model, objective)
    for name, p in params.items():
        tensorio.save(os.path.join(tmp, f"param.{name}.gpt"), p.data)
    st = None
    if state is not None:
        st = {k: state[k] for k in ("phase_index", "epoch", "phases")}
        st["early"] = state["early"]
        adam = state.get("adam")
        st["adam"] = None if adam is None else {"t": adam["t"], "lr": adam["lr"]}
        if adam is not None:
            for k in adam["m"]:
                tensorio.save(os.path.join(tmp, f"adam.m.{k}.gpt"), adam["m"][k])
                tensorio.save(os.path.join(tmp, f"adam.v.{k}.gpt"), adam["v"][k])
        for k, v in (state.get("best_params") or {}).items():
            tensorio.save(os.path.join(tmp, f"best.{k}.gpt"), v)
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": model.kind,
        "config": cfg.to_dict(),
        "descriptors": {"encoder": model.encoder.descriptor(), "decoder": model.decoder.descriptor()},
        "prior": None if model.prior is None else model.prior.meta(),
        "view_cond": None if model.view_cond is None else model.view_cond.tolist(),
        "objective": {"mode": objective.mode, "lam": objective.lam, "sigma_y2": objective.sigma_y2,
                      "latent_dim": objective.latent_dim, "pixels": objective.pixels},
        "dtype": str(model.dtype),
        "parameters": sorted(params),
        "state": st,
    }
    if extra:
        meta.update(extra)
    with open(os.path.join(tmp, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
    old = path + ".old"
    if os.path.exists(old):
        shutil.rmtree(old)
    if os.path.exists(path):
        os.replace(path, old)
    os.replace(tmp, path)
    if os.path.exists(old):
        shutil.rmtree(old)
    return meta


def _build_from_meta(meta):
    enc = meta["descriptors"]["encoder"]
    cfg = RunConfig.from_dict(meta["config"])
    prior = None
    pm = meta["prior"]
    if pm is not None:
        view = pm["view"]
        if view["kind"] == "periodic":
            vk = PeriodicSEKernel(view["angles"], period=view["period"])
        elif view["kind"] == "fullrank":
            vk = FullRankViewCov(view["n_views"])
        else:
            raise CheckpointError(f"unknown view kernel {view['kind']!r}")
        prior = GPPrior(vk, pm["n_objects"], pm["object_dim"])
    angles = None
    if meta["view_cond"] is not None:
        vc = np.asarray(meta["view_cond"])
        angles = np.arctan2(vc[:, 0], vc[:, 1])
    model = Model.build(meta["kind"], enc["name"], enc["channels"], enc["size"], enc["latent_dim"],
                        prior=prior, angles=angles, dtype=np.dtype(meta["dtype"]))
    if model.view_cond is not None:
        model.view_cond = np.asarray(meta["view_cond"], dtype=np.float64)
    om = meta["objective"]
    objective = Objective(om["mode"], om["latent_dim"], om["pixels"], om["lam"], om["sigma_y2"])
    return model, objective, cfg


def load_checkpoint(path):
    meta_path = os.path.join(path, "meta.json")
    if not os.path.isfile(meta_path):
        raise CheckpointError(f"no checkpoint at {path!r}")
    with open(meta_path) as fh:
        meta = json.load(fh)
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {meta.get('format_version')!r}")
    model, objective, cfg = _build_from_meta(meta)
    tensors = {}
    for fname in sorted(os.listdir(path)):
        if fname.endswith(".gpt"):
            try:
                tensors[fname[:-4]] = tensorio.load(os.path.join(path, fname))
            except tensorio.TensorFormatError as exc:
                raise CheckpointError(f"{fname}: {exc}") from exc
    for name, p in _all_params(model, objective).items():
        arr = tensors.get("param." + name)
        if arr is None:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        if arr.shape != p.shape:
            raise CheckpointError(f"tensor {name!r} has shape {arr.shape}, architecture expects {p.shape}")
        p.data = arr.astype(p.dtype)
    tensors = {k: v for k, v in tensors.items() if not k.startswith("param.")}
    return Checkpoint(model, objective, cfg, meta, tensors)


def copy_networks(src_model, dst_model):
    """Copy encoder/decoder tensors (used by ``--init-from``)."""
    src = {**src_model.encoder.named_parameters(), **src_model.decoder.named_parameters()}
    dst = {**dst_model.encoder.named_parameters(), **dst_model.decoder.named_parameters()}
    if set(src) != set(dst):
        raise CheckpointError("network architectures differ between checkpoint and model")
    for k, p in dst.items():
        if src[k].shape != p.shape:
            raise CheckpointError(f"tensor {k!r} has shape {src[k].shape}, model expects {p.shape}")
        p.data = src[k].data.astype(p.dtype, copy=True)


def check_compatible(ckpt, dataset):
    enc = ckpt.meta["descriptors"]["encoder"]
    if enc["size"] != dataset.image_size or enc["channels"] != dataset.channels:
        raise CheckpointError(
            f"checkpoint expects {enc['channels']}x{enc['size']}x{enc['size']} images, "
            f"dataset has {dataset.channels}x{dataset.image_size}x{dataset.image_size}")
    pm = ckpt.meta["prior"]
    if pm is not None:
        if pm["n_objects"] < dataset.n_objects:
            raise CheckpointError(f"checkpoint knows {pm['n_objects']} objects, dataset has {dataset.n_objects}")
        nv = len(pm["view"].get("angles", [])) or pm["view"].get("n_views")
        if nv != dataset.n_views:
            raise CheckpointError(f"checkpoint has {nv} views, dataset has {dataset.n_views}")


def checkpoint_hash(path):
    """SHA-256 over file names and contents, in sorted order."""
    h = hashlib.sha256()
    for fname in sorted(os.listdir(path)):
        h.update(fname.encode())
        with open(os.path.join(path, fname), "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()
