"""Run configuration (JSON file + command-line overrides)."""

import json
import math
from dataclasses import asdict, dataclass, field, fields

MODEL_NAMES = {"vae": "vae", "gppvae-joint": "gppvae_joint", "gppvae-dis": "gppvae_dis", "cvae": "cvae",
               "gppvae_joint": "gppvae_joint", "gppvae_dis": "gppvae_dis"}


@dataclass
class RunConfig:
    model: str = "gppvae_joint"
    arch: str = "conv"
    latent_dim: int = 16
    object_dim: int = 8
    view_kernel: str = "periodic"        # periodic | fullrank
    period: float = math.pi
    lam: float = 1e-3
    lambda_grid: list = field(default_factory=list)
    lambda_criterion: str = "elbo"       # elbo | prediction
    loss_mode: str = "si_lambda"         # si_lambda | eq8
    sigma_y2: float = 0.01
    alpha_init: float = 1.0
    epochs_vae: int = 100
    epochs_gp: int = 100
    epochs_joint: int = 200
    patience: int = 20
    batch_size: int = 128
    lr_vae: float = 1e-3
    lr_gp: float = 1e-2
    lr_joint: float = 1e-3
    prediction_mode: str = "mean"        # mean | mc
    mc_samples: int = 10
    dtype: str = "float32"
    seed: int = 0
    threads: int = 0
    checkpoint_every: int = 10
    data: str = ""
    out: str = ""

    def __post_init__(self):
        self.model = MODEL_NAMES.get(self.model, self.model)
        self.validate()

    def validate(self):
        if self.model not in ("vae", "gppvae_joint", "gppvae_dis", "cvae"):
            raise ValueError(f"unknown model {self.model!r}; expected one of vae, gppvae-joint, gppvae-dis, cvae")
        if self.latent_dim < 1 or self.object_dim < 1:
            raise ValueError("latent_dim and object_dim must be >= 1")
        if self.arch not in ("conv", "mlp"):
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.view_kernel not in ("periodic", "fullrank"):
            raise ValueError(f"unknown view kernel {self.view_kernel!r}")
        if self.loss_mode not in ("si_lambda", "eq8"):
            raise ValueError(f"unknown loss mode {self.loss_mode!r}")
        if self.lambda_criterion not in ("elbo", "prediction"):
            raise ValueError(f"unknown lambda criterion {self.lambda_criterion!r}")
        if self.prediction_mode not in ("mean", "mc"):
            raise ValueError(f"unknown prediction mode {self.prediction_mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lam > 0 or any(not g > 0 for g in self.lambda_grid):
            raise ValueError("lambda values must be positive")
        if not self.period > 0:
            raise ValueError("period must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if isinstance(d.get("period"), str):
            d["period"] = {"pi": math.pi, "2pi": 2 * math.pi}[d["period"]]
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def replace(self, **overrides):
        d = self.to_dict()
        d.update({k: v for k, v in overrides.items() if v is not None})
        return RunConfig.from_dict(d)
