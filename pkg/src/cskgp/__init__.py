"""Nonstationary Gaussian-process regression with convolutional spectral kernels."""

import jax

jax.config.update("jax_enable_x64", True)

from .errors import (  # noqa: E402
    CSKError,
    FactorizationFailed,
    NumericalError,
    ValidationError,
)
from .kernels import HyperValues, KernelSpec, gram  # noqa: E402

__all__ = [
    "CSKError",
    "FactorizationFailed",
    "HyperValues",
    "KernelSpec",
    "NumericalError",
    "ValidationError",
    "gram",
]
__version__ = "0.1.0"
