"""Exception hierarchy shared across the package."""


class FloodSTGCNError(Exception):
    """Base class for all package errors."""


class DimensionError(FloodSTGCNError, ValueError):
    """Operand shapes are incompatible."""


class WindowTooShortError(DimensionError):
    """A time window is shorter than the kernel that consumes it."""


class DataError(FloodSTGCNError, ValueError):
    """Input data is malformed, incomplete or non-finite."""


class ConfigError(FloodSTGCNError, ValueError):
    """A configuration value is invalid."""


class NumericError(FloodSTGCNError, ArithmeticError):
    """An iterative numeric routine failed."""

    def __init__(self, message, iterations=None):
        super().__init__(message)
        self.iterations = iterations


class TrainingError(NumericError):
    """Training diverged."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class CheckpointError(FloodSTGCNError):
    """A checkpoint file cannot be loaded."""


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class ArchitectureMismatchError(CheckpointError):
    pass
