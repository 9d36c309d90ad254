"""Exception types shared across the package."""


class TGMError(Exception):
    """Base class for package errors."""


class DimensionMismatchError(TGMError, ValueError):
    """Shapes or grids that should agree do not."""


class FormatError(TGMError, ValueError):
    """A binary file does not follow its declared layout."""


class ConfigError(TGMError, ValueError):
    """Invalid or unknown configuration entry."""


class CheckpointMismatchError(TGMError):
    """Checkpoint manifest disagrees with what the caller expects."""


class TrainingDivergedError(TGMError, FloatingPointError):
    """Loss became non-finite during training."""


class FrozenParameterError(TGMError):
    """Parameters that must stay frozen were modified."""
