"""Container tying encoder, decoder and (optionally) the GP prior together."""

import numpy as np

from . import tensor as T
from .nnet import Decoder, Encoder, reparameterize

KINDS = ("vae", "gppvae_joint", "gppvae_dis", "cvae")


def view_conditioning(angles):
    """CVAE view features ``[sin a, cos a]`` per view."""
    angles = np.asarray(angles, dtype=np.float64).reshape(-1)
    return np.stack([np.sin(angles), np.cos(angles)], axis=1)


class Model:
    def __init__(self, kind, encoder, decoder, prior=None, view_cond=None):
        if kind not in KINDS:
            raise ValueError(f"unknown model kind {kind!r}; expected one of {KINDS}")
        self.kind = kind
        self.encoder = encoder
        self.decoder = decoder
        self.prior = prior
        self.view_cond = None if view_cond is None else np.asarray(view_cond, dtype=np.float64)

    @classmethod
    def build(cls, kind, arch, channels, size, latent_dim, prior=None, angles=None,
              dtype=np.float64, seed=0):
        cond = view_conditioning(angles) if kind == "cvae" else None
        r = 0 if cond is None else cond.shape[1]
        enc = Encoder(arch, channels, size, latent_dim, cond_dim=r, dtype=dtype, seed=seed + 1)
        dec = Decoder(arch, channels, size, latent_dim, cond_dim=r, dtype=dtype, seed=seed + 2)
        return cls(kind, enc, dec, prior=prior, view_cond=cond)

    @property
    def latent_dim(self):
        return self.encoder.latent_dim

    @property
    def pixels(self):
        return self.encoder.pixels

    @property
    def dtype(self):
        return self.encoder.dtype

    def cond_for(self, q_ids):
        if self.view_cond is None:
            return None
        return self.view_cond[np.asarray(q_ids)].astype(self.dtype)

    def groups(self):
        out = {"enc": self.encoder.named_parameters(), "dec": self.decoder.named_parameters()}
        if self.prior is not None:
            out["gp"] = self.prior.named_parameters()
        return out

    def named_parameters(self):
        out = {}
        for g in self.groups().values():
            out.update(g)
        return out

    def encode(self, y, q_ids=None):
        return self.encoder(y, self.cond_for(q_ids) if q_ids is not None else None)

    def decode(self, z, q_ids=None):
        return self.decoder(z, self.cond_for(q_ids) if q_ids is not None else None)

    def sample(self, y, eps, q_ids=None):
        mu, lv = self.encode(y, q_ids)
        return mu, lv, reparameterize(mu, lv, eps)

    def encode_means(self, Y, batch_size=256, q_ids=None):
        """Posterior means for all rows of ``Y`` without building graphs."""
        out = np.empty((len(Y), self.latent_dim))
        with T.no_grad():
            for s in range(0, len(Y), batch_size):
                sl = slice(s, s + batch_size)
                q = None if q_ids is None else np.asarray(q_ids)[sl]
                out[sl] = self.encode(Y[sl].astype(self.dtype, copy=False), q)[0].data
        return out

    def decode_numpy(self, Z, batch_size=256, q_ids=None):
        Z = np.asarray(Z)
        outs = []
        with T.no_grad():
            for s in range(0, len(Z), batch_size):
                sl = slice(s, s + batch_size)
                q = None if q_ids is None else np.asarray(q_ids)[sl]
                outs.append(self.decode(Z[sl].astype(self.dtype), q).data)
        return np.concatenate(outs, axis=0) if outs else np.zeros((0,))
