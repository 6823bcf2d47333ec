"""Gaussian-process prior variational autoencoder on structured image collections.

Numerical kernels live in :mod:`gppvae._accel` and are compiled with
numba when it is installed; set ``GPPVAE_DISABLE_NUMBA=1`` to force the
pure-numpy versions.
"""

__version__ = "0.1.0"
