"""Exception types shared across the pipeline."""


class WeakSurgError(Exception):
    """Base class for all package errors."""


class ConfigurationError(WeakSurgError, ValueError):
    """Invalid configuration, shape mismatch or out-of-range parameter."""


class DatasetIOError(WeakSurgError, OSError):
    """Dataset or checkpoint file missing, corrupt or malformed.

    ``path`` names the offending file.
    """

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


class CheckpointError(DatasetIOError):
    """Checkpoint cannot be read (bad format-version or corrupt payload)."""


class NumericFault(WeakSurgError, FloatingPointError):
    """Non-finite value where a finite one is required."""

    def __init__(self, message, component=None):
        super().__init__(message)
        self.component = component
