"""Loss weighting for the two supported objectives.

``si_lambda`` (default)::

    (1/K) sum (y - g(z))^2 + (lam / L) * [-log p(Z) - 1/2 sum log sigma_psi^2]

``eq8`` (observation noise learned)::

    (N K / 2) log sigma_y^2 + sum ||y - g(z)||^2 / (2 sigma_y^2)
        - log p(Z) - 1/2 sum log sigma_psi^2

In both, ``-1/2 sum log sigma_psi^2`` is the negated entropy of the
posterior (up to constants), which is the sign that makes the loss the
negative ELBO.
"""

from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T

MODES = ("si_lambda", "eq8")


@dataclass
class LossBreakdown:
    recon: float
    gp_term: float
    reg_term: float
    total: float
    sigma_y2: float
    lam: float

    def as_dict(self):
        return asdict(self)


class Objective:
    def __init__(self, mode, latent_dim, pixels, lam=1.0, sigma_y2=1.0):
        if mode not in MODES:
            raise ValueError(f"unknown loss mode {mode!r}; expected one of {MODES}")
        if mode == "si_lambda" and not lam > 0:
            raise ValueError("lambda must be positive")
        if mode == "eq8" and not sigma_y2 > 0:
            raise ValueError("sigma_y2 must be positive")
        self.mode = mode
        self.latent_dim = int(latent_dim)
        self.pixels = int(pixels)
        self.lam = float(lam)
        self.sigma_raw = T.Tensor(np.log(np.float64(sigma_y2)).reshape(()), requires_grad=True,
                                  name="noise.sigma_y2_raw")

    @property
    def sigma_y2(self):
        return float(np.exp(self.sigma_raw.data))

    def named_parameters(self):
        return {"noise.sigma_y2_raw": self.sigma_raw} if self.mode == "eq8" else {}

    @property
    def prior_weight(self):
        return self.lam / self.latent_dim if self.mode == "si_lambda" else 1.0

    def recon_weight(self):
        if self.mode == "si_lambda":
            return 1.0 / self.pixels
        return T.mul(T.exp(T.neg(self.sigma_raw)), 0.5)

    def recon_weight_value(self):
        w = self.recon_weight()
        return w if isinstance(w, float) else float(w.data)

    def noise_term(self, n_samples):
        """``(N K / 2) log sigma_y^2`` in eq8 mode, else ``None``."""
        if self.mode != "eq8":
            return None
        return T.mul(self.sigma_raw, 0.5 * n_samples * self.pixels)

    def breakdown(self, sq_residual, gp_term, reg_term, n_samples):
        recon = self.recon_weight_value() * sq_residual
        total = recon + self.prior_weight * (gp_term + reg_term)
        if self.mode == "eq8":
            total += 0.5 * n_samples * self.pixels * float(self.sigma_raw.data)
        return LossBreakdown(float(recon), float(gp_term), float(reg_term), float(total), self.sigma_y2, self.lam)
