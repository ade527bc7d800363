"""Exception types raised across the package."""


class ConfigurationError(ValueError):
    """Inconsistent module wiring or configuration values."""


class InputError(ValueError):
    """Malformed input data (wrong shape, indivisible size, ...)."""


class WeightLoadError(RuntimeError):
    """A weight or checkpoint file does not match the expected architecture."""


class DatasetError(RuntimeError):
    """Dataset directory is incomplete or a file cannot be decoded."""


class TrainingDiverged(RuntimeError):
    """Raised when the training loss becomes non-finite."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
