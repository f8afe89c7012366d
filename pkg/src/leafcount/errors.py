"""Exception types shared across the package; the CLI maps them to exit codes."""
from .tensor import NumericError


class ConfigError(ValueError):
    """Bad or unknown configuration."""


class DataError(Exception):
    """Unreadable, missing or inconsistent input data."""


class CheckpointError(DataError):
    pass


class BadMagicError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


__all__ = ["ConfigError", "DataError", "CheckpointError", "BadMagicError", "TruncatedCheckpointError",
           "ShapeMismatchError", "NumericError"]
