"""Synthetic rotated-glyph data, the train/val/test split, and dataset directories.

Each object is a smooth closed stroke with its own shape parameters
(base radius, Fourier harmonics of the radius, centre offset, stroke
width), rendered once and then rotated through ``Q`` evenly spaced
angles ``2 pi q / Q`` by bilinear interpolation about the image centre.
Samples are ordered object-major: ``n = p * Q + q``.

A dataset directory holds ``manifest.json`` plus ``images.gpt``,
``object_ids.gpt``, ``view_ids.gpt`` and ``view_features.gpt``.
External data can be converted by building a :class:`Dataset` with
:meth:`Dataset.from_arrays` and calling :func:`save_dataset`.
"""

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import _accel, tensorio

FORMAT_VERSION = 1
N_HARMONICS = 4
CURVE_POINTS = 256


@dataclass
class Dataset:
    images: np.ndarray          # (N, C, S, S) in [0, 1]
    object_ids: np.ndarray      # (N,)
    view_ids: np.ndarray        # (N,)
    view_features: np.ndarray   # (Q, R); here R = 1 angle in radians
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.object_ids = np.asarray(self.object_ids, dtype=np.int64)
        self.view_ids = np.asarray(self.view_ids, dtype=np.int64)
        self.view_features = np.asarray(self.view_features, dtype=np.float64).reshape(len(self.view_features), -1)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, S, S), got {self.images.shape}")
        n = len(self.images)
        if self.object_ids.shape != (n,) or self.view_ids.shape != (n,):
            raise ValueError("id arrays must have one entry per image")
        if n and (self.view_ids.min() < 0 or self.view_ids.max() >= self.n_views):
            raise ValueError("view id out of range")
        if n and self.object_ids.min() < 0:
            raise ValueError("negative object id")

    @classmethod
    def from_arrays(cls, images, object_ids, view_ids, view_features, seed=0, n_objects=None):
        ds = cls(np.asarray(images), object_ids, view_ids, view_features, seed)
        if n_objects is not None:
            ds.meta["n_objects"] = int(n_objects)
        return ds

    @property
    def n_samples(self):
        return len(self.images)

    @property
    def n_objects(self):
        return int(self.meta.get("n_objects", self.object_ids.max() + 1 if len(self.object_ids) else 0))

    @property
    def n_views(self):
        return len(self.view_features)

    @property
    def image_size(self):
        return self.images.shape[-1]

    @property
    def channels(self):
        return self.images.shape[1]

    @property
    def angles(self):
        return self.view_features[:, 0]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        ds = Dataset(self.images[idx], self.object_ids[idx], self.view_ids[idx], self.view_features, self.seed,
                     dict(self.meta, n_objects=self.n_objects))
        return ds


@dataclass
class SplitSpec:
    val_fraction: float = 0.1
    dropout: float = 0.25
    held_out_view: int = None
    seed: int = 0

    def __post_init__(self):
        for name in ("val_fraction", "dropout"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {v}")


@dataclass
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    dropped: np.ndarray
    held_out_view: int
    spec: SplitSpec

    def as_dict(self):
        return {"train": self.train.tolist(), "val": self.val.tolist(), "test": self.test.tolist(),
                "dropped": self.dropped.tolist(), "held_out_view": int(self.held_out_view),
                "val_fraction": self.spec.val_fraction, "dropout": self.spec.dropout,
                "seed": self.spec.seed}

    @classmethod
    def from_dict(cls, d):
        spec = SplitSpec(d["val_fraction"], d["dropout"], d["held_out_view"], d["seed"])
        arr = lambda k: np.asarray(d[k], dtype=np.int64)  # noqa: E731
        return cls(arr("train"), arr("val"), arr("test"), arr("dropped"), int(d["held_out_view"]), spec)


def rotate(img, angle):
    out = np.empty_like(img, dtype=np.float64)
    _accel.rotate_bilinear(np.ascontiguousarray(img, dtype=np.float64), float(angle), out)
    return out


def _glyph(rng, size):
    r0 = rng.uniform(0.22, 0.32) * size
    amps = rng.normal(0.0, 1.0, N_HARMONICS) * (0.32 / np.arange(1, N_HARMONICS + 1) ** 0.6)
    phases = rng.uniform(0.0, 2.0 * np.pi, N_HARMONICS)
    aspect = rng.uniform(0.45, 1.0)
    tilt = rng.uniform(0.0, np.pi)
    offset = rng.uniform(-0.10, 0.10, 2) * size
    width = rng.uniform(0.8, 1.3)

    t = np.linspace(0.0, 2.0 * np.pi, CURVE_POINTS, endpoint=False)
    k = np.arange(1, N_HARMONICS + 1)[:, None]
    r = r0 * (1.0 + np.sum(amps[:, None] * np.cos(k * t + phases[:, None]), axis=0))
    r = np.maximum(r, 0.25 * r0)
    x, y = r * np.cos(t), aspect * r * np.sin(t)
    ct, st = np.cos(tilt), np.sin(tilt)
    x, y = ct * x - st * y + offset[0], st * x + ct * y + offset[1]
    # keep the stroke inside the inscribed circle so rotations never clip it
    reach = np.sqrt(x * x + y * y).max() + 3.0 * width
    limit = size / 2.0 - 1.0
    if reach > limit:
        shrink = (limit - 3.0 * width) / (reach - 3.0 * width)
        x, y = x * shrink, y * shrink

    c = (size - 1) / 2.0
    grid = np.arange(size, dtype=np.float64) - c
    py, px = np.meshgrid(grid, grid, indexing="ij")
    d2 = (py.reshape(-1, 1) - y[None, :]) ** 2 + (px.reshape(-1, 1) - x[None, :]) ** 2
    img = np.exp(-d2.min(axis=1) / (2.0 * width * width)).reshape(size, size)
    return np.clip(img, 0.0, 1.0)


def generate_glyphs(n_objects, n_views, size=28, seed=0):
    """Render ``n_objects`` glyphs at ``n_views`` rotations each (N = P * Q)."""
    if n_objects < 1 or n_views < 2 or size < 16:
        raise ValueError("need n_objects >= 1, n_views >= 2 and size >= 16")
    angles = 2.0 * np.pi * np.arange(n_views) / n_views
    images = np.empty((n_objects * n_views, 1, size, size), dtype=np.float32)
    children = np.random.SeedSequence(seed).spawn(n_objects)
    for p in range(n_objects):
        base = _glyph(np.random.default_rng(children[p]), size)
        for q in range(n_views):
            images[p * n_views + q, 0] = np.clip(base if q == 0 else rotate(base, angles[q]), 0.0, 1.0)
    object_ids = np.repeat(np.arange(n_objects), n_views)
    view_ids = np.tile(np.arange(n_views), n_objects)
    meta = {"n_objects": n_objects, "generator": "glyphs"}
    return Dataset(images, object_ids, view_ids, angles[:, None], seed, meta)


def split(dataset, spec=None):
    """Validation / drop / held-out-view split, stratified per view.

    Per view, ``round(val_fraction * n_q)`` samples go to validation and
    ``round(dropout * rest)`` of the remainder are dropped.  Kept samples
    of the held-out view form the test set; the rest is training.  The
    drop is re-drawn (at most 100 times) until every test object has at
    least one training view.
    """
    spec = spec or SplitSpec()
    Q = dataset.n_views
    held = Q // 2 if spec.held_out_view is None else int(spec.held_out_view)
    if not 0 <= held < Q or not np.any(dataset.view_ids == held):
        raise ValueError(f"held-out view {held} not present in dataset")
    rng = np.random.default_rng(spec.seed)
    val, rest = [], {}
    for q in range(Q):
        members = np.flatnonzero(dataset.view_ids == q)
        members = members[rng.permutation(len(members))]
        n_val = int(round(spec.val_fraction * len(members)))
        val.append(members[:n_val])
        rest[q] = members[n_val:]
    val = np.sort(np.concatenate(val))

    for _ in range(100):
        kept, dropped = {}, []
        for q in range(Q):
            members = rest[q][rng.permutation(len(rest[q]))]
            n_drop = int(round(spec.dropout * len(members)))
            dropped.append(members[:n_drop])
            kept[q] = members[n_drop:]
        test = np.sort(kept[held])
        train = np.sort(np.concatenate([kept[q] for q in range(Q) if q != held]))
        if len(test) == 0:
            raise ValueError("held-out view has no retained samples; test set would be empty")
        if np.all(np.isin(dataset.object_ids[test], dataset.object_ids[train])):
            return Split(train, val, test, np.sort(np.concatenate(dropped)), held, spec)
    raise RuntimeError("could not draw a split where every test object has a training view")


# ---------------------------------------------------------------------------
# directory format
# ---------------------------------------------------------------------------

_TENSORS = ("images", "object_ids", "view_ids", "view_features")


def save_dataset(path, dataset, split_=None, extra=None):
    os.makedirs(path, exist_ok=True)
    for name in _TENSORS:
        tensorio.save(os.path.join(path, name + ".gpt"), getattr(dataset, name))
    manifest = {
        "format_version": FORMAT_VERSION,
        "n_samples": dataset.n_samples,
        "n_objects": dataset.n_objects,
        "n_views": dataset.n_views,
        "channels": dataset.channels,
        "image_size": dataset.image_size,
        "angles": dataset.angles.tolist(),
        "seed": int(dataset.seed),
        "split": None if split_ is None else split_.as_dict(),
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


def load_dataset(path):
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    arrs = {name: tensorio.load(os.path.join(path, name + ".gpt")) for name in _TENSORS}
    ds = Dataset(arrs["images"], np.rint(arrs["object_ids"]), np.rint(arrs["view_ids"]),
                 arrs["view_features"], manifest.get("seed", 0), {"n_objects": manifest["n_objects"]})
    sp = manifest.get("split")
    return ds, (Split.from_dict(sp) if sp else None), manifest


def manifest_hash(path):
    with open(os.path.join(path, "manifest.json"), "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
