"""Exemplar-conditioned latent-diffusion video colorization."""

from .errors import (
    CheckpointError,
    ConfigurationError,
    LatentColorError,
    ManifestError,
    NumericalError,
    ShapeError,
)

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigurationError",
    "LatentColorError",
    "ManifestError",
    "NumericalError",
    "ShapeError",
    "__version__",
]
