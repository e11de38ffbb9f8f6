"""Exception types shared across the package."""


class LatentColorError(Exception):
    """Base class for all package errors."""


class ConfigurationError(LatentColorError, ValueError):
    """Invalid hyperparameter, schedule bound or model configuration."""


class ShapeError(LatentColorError, ValueError):
    """Array or tensor dimensions do not satisfy an operation's contract."""


class ManifestError(LatentColorError, ValueError):
    """Frame corpus layout or manifest content is invalid."""


class CheckpointError(LatentColorError, RuntimeError):
    """Checkpoint is missing, corrupted or written by an incompatible version."""


class NumericalError(LatentColorError, ArithmeticError):
    """A computation produced non-finite values or failed to converge."""
