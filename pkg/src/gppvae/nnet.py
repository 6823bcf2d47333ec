"""Encoder/decoder networks, the diagonal-Gaussian posterior and its sampler.

Two architectures are available:

``conv``
    encoder: conv(C->8, 3x3, s2) -> relu -> conv(8->16, 3x3, s2) -> relu
    -> dense(16*s*s -> 2L); the decoder mirrors it with dense(L -> 16*s*s)
    -> relu -> two transposed convs -> sigmoid.
``mlp``
    encoder K -> 256 -> 2L, decoder L -> 256 -> K.

Conditioning features (CVAE) of width R are fed as constant extra
channels at the encoder input and stacked onto the flattened features
before the dense layer; the decoder stacks them onto ``z`` and again as
channels in front of the first transposed convolution.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from ._accel import conv_out_size

CONV_CHANNELS = (8, 16)
MLP_HIDDEN = 256


def glorot(rng, shape, fan_in, fan_out, dtype):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class LatentBatch:
    mu: np.ndarray
    log_var: np.ndarray
    eps: np.ndarray
    z: np.ndarray


def reparameterize(mu, log_var, eps):
    """``z = mu + eps * exp(log_var / 2)``; ``eps`` receives no gradient."""
    if mu.shape != log_var.shape or tuple(mu.shape) != tuple(np.shape(eps)):
        raise ValueError(f"shape mismatch: mu {mu.shape}, log_var {log_var.shape}, eps {np.shape(eps)}")
    eps = eps.data if isinstance(eps, T.Tensor) else np.asarray(eps, dtype=mu.dtype)
    return mu + T.Tensor(eps.astype(mu.dtype, copy=False)) * T.exp(log_var * 0.5)


class _Net:
    prefix = ""

    def __init__(self, arch, channels, size, latent_dim, cond_dim=0, dtype=np.float64,
                 seed=0, init="glorot"):
        if arch not in ("conv", "mlp"):
            raise ValueError(f"unknown architecture {arch!r}")
        self.arch = arch
        self.channels = int(channels)
        self.size = int(size)
        self.latent_dim = int(latent_dim)
        self.cond_dim = int(cond_dim)
        self.dtype = np.dtype(dtype)
        self.s1 = conv_out_size(self.size, 3, 2, 1)
        self.s2 = conv_out_size(self.s1, 3, 2, 1)
        rng = np.random.default_rng(seed)
        self.params = {}
        for name, shape, fan_in, fan_out in self._layout():
            if name.endswith(".b") or init == "zeros":
                data = np.zeros(shape, dtype=self.dtype)
            else:
                data = glorot(rng, shape, fan_in, fan_out, self.dtype)
            self.params[name] = T.Tensor(data, requires_grad=True, name=self.prefix + name)

    @property
    def pixels(self):
        return self.channels * self.size * self.size

    def descriptor(self):
        return {"name": self.arch, "channels": self.channels, "size": self.size,
                "latent_dim": self.latent_dim, "cond_dim": self.cond_dim,
                "conv_channels": list(CONV_CHANNELS), "mlp_hidden": MLP_HIDDEN}

    def named_parameters(self):
        return {self.prefix + k: v for k, v in self.params.items()}

    def _cond_planes(self, cond, side):
        c = T.reshape(cond, (cond.shape[0], self.cond_dim, 1, 1))
        return T.broadcast_to(c, (cond.shape[0], self.cond_dim, side, side))

    def _check_cond(self, cond, batch):
        if self.cond_dim == 0:
            return None
        if cond is None:
            raise ValueError("this network expects conditioning features")
        cond = cond if isinstance(cond, T.Tensor) else T.Tensor(np.asarray(cond, dtype=self.dtype))
        if cond.shape != (batch, self.cond_dim):
            raise ValueError(f"conditioning shape {cond.shape}, expected {(batch, self.cond_dim)}")
        return cond


class Encoder(_Net):
    """Maps an image batch (B, C, S, S) to posterior means and log-variances (B, L)."""

    prefix = "enc."

    def _layout(self):
        c, r, two_l = self.channels, self.cond_dim, 2 * self.latent_dim
        if self.arch == "conv":
            c1, c2 = CONV_CHANNELS
            flat = c2 * self.s2 * self.s2
            return [("conv1.w", (c1, c + r, 3, 3), (c + r) * 9, c1 * 9), ("conv1.b", (c1,), 0, 0),
                    ("conv2.w", (c2, c1, 3, 3), c1 * 9, c2 * 9), ("conv2.b", (c2,), 0, 0),
                    ("fc.w", (flat + r, two_l), flat + r, two_l), ("fc.b", (two_l,), 0, 0)]
        k = self.pixels
        return [("fc1.w", (k + r, MLP_HIDDEN), k + r, MLP_HIDDEN), ("fc1.b", (MLP_HIDDEN,), 0, 0),
                ("fc2.w", (MLP_HIDDEN, two_l), MLP_HIDDEN, two_l), ("fc2.b", (two_l,), 0, 0)]

    def __call__(self, y, cond=None):
        y = y if isinstance(y, T.Tensor) else T.Tensor(np.asarray(y, dtype=self.dtype))
        b = y.shape[0]
        if y.data.size != b * self.pixels:
            raise ValueError(f"image batch {y.shape} does not match {self.channels}x{self.size}x{self.size}")
        cond = self._check_cond(cond, b)
        p = self.params
        if self.arch == "conv":
            h = T.reshape(y, (b, self.channels, self.size, self.size))
            if cond is not None:
                h = T.concat([h, self._cond_planes(cond, self.size)], axis=1)
            h = T.relu(T.conv2d(h, p["conv1.w"], p["conv1.b"]))
            h = T.relu(T.conv2d(h, p["conv2.w"], p["conv2.b"]))
            h = T.reshape(h, (b, -1))
            if cond is not None:
                h = T.concat([h, cond], axis=1)
            h = T.dense(h, p["fc.w"], p["fc.b"])
        else:
            h = T.reshape(y, (b, self.pixels))
            if cond is not None:
                h = T.concat([h, cond], axis=1)
            h = T.relu(T.dense(h, p["fc1.w"], p["fc1.b"]))
            h = T.dense(h, p["fc2.w"], p["fc2.b"])
        L = self.latent_dim
        return T.take(h, slice(0, L), axis=1), T.take(h, slice(L, 2 * L), axis=1)


class Decoder(_Net):
    """Maps latents (B, L) to pixel intensities (B, C, S, S) in [0, 1]."""

    prefix = "dec."

    def _layout(self):
        c, r, L = self.channels, self.cond_dim, self.latent_dim
        if self.arch == "conv":
            c1, c2 = CONV_CHANNELS
            flat = c2 * self.s2 * self.s2
            return [("fc.w", (L + r, flat), L + r, flat), ("fc.b", (flat,), 0, 0),
                    ("deconv1.w", (c2 + r, c1, 3, 3), (c2 + r) * 9, c1 * 9), ("deconv1.b", (c1,), 0, 0),
                    ("deconv2.w", (c1, c, 3, 3), c1 * 9, c * 9), ("deconv2.b", (c,), 0, 0)]
        k = self.pixels
        return [("fc1.w", (L + r, MLP_HIDDEN), L + r, MLP_HIDDEN), ("fc1.b", (MLP_HIDDEN,), 0, 0),
                ("fc2.w", (MLP_HIDDEN, k), MLP_HIDDEN, k), ("fc2.b", (k,), 0, 0)]

    def __call__(self, z, cond=None):
        z = z if isinstance(z, T.Tensor) else T.Tensor(np.asarray(z, dtype=self.dtype))
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ValueError(f"latent batch {z.shape}, expected (B, {self.latent_dim})")
        b = z.shape[0]
        cond = self._check_cond(cond, b)
        p = self.params
        h = z if cond is None else T.concat([z, cond], axis=1)
        if self.arch == "conv":
            c2 = CONV_CHANNELS[1]
            h = T.relu(T.dense(h, p["fc.w"], p["fc.b"]))
            h = T.reshape(h, (b, c2, self.s2, self.s2))
            if cond is not None:
                h = T.concat([h, self._cond_planes(cond, self.s2)], axis=1)
            op1 = self.s1 - (2 * (self.s2 - 1) + 1)
            op2 = self.size - (2 * (self.s1 - 1) + 1)
            h = T.relu(T.conv_transpose2d(h, p["deconv1.w"], p["deconv1.b"], output_padding=op1))
            h = T.conv_transpose2d(h, p["deconv2.w"], p["deconv2.b"], output_padding=op2)
        else:
            h = T.relu(T.dense(h, p["fc1.w"], p["fc1.b"]))
            h = T.dense(h, p["fc2.w"], p["fc2.b"])
            h = T.reshape(h, (b, self.channels, self.size, self.size))
        return T.sigmoid(h)


def from_descriptor(cls, desc, dtype=np.float64, seed=0):
    return cls(desc["name"], desc["channels"], desc["size"], desc["latent_dim"],
               desc.get("cond_dim", 0), dtype=dtype, seed=seed)
