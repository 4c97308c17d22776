"""Exception types shared across the package."""


class IcarError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(IcarError):
    """Tensor shapes are incompatible for the requested operation."""


class ContractError(IcarError):
    """A documented precondition was violated by the caller."""


class NonFiniteError(IcarError):
    """An operation produced or received NaN/Inf values."""


class DataError(IcarError):
    """A dataset file or manifest failed to load or validate."""


class UndefinedMetricError(IcarError):
    """The requested metric is undefined for the given inputs."""


class TrainingDivergedError(IcarError):
    """Training hit a non-finite loss; carries last-step diagnostics."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ConfigError(IcarError):
    """A run configuration key is unknown or violates a constraint."""
