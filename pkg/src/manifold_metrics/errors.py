"""Exception hierarchy shared across the package."""


class ManifoldMetricsError(Exception):
    """Base class for all package errors."""


class DegenerateJacobianError(ManifoldMetricsError, ValueError):
    """A Jacobian column block is numerically rank deficient."""

    def __init__(self, message, n_columns=None):
        super().__init__(message)
        self.n_columns = n_columns


class DimensionError(ManifoldMetricsError, ValueError):
    pass


class EvaluationError(ManifoldMetricsError, RuntimeError):
    """Non-finite values produced while evaluating a model."""


class EstimationError(ManifoldMetricsError, RuntimeError):
    """Too many samples had to be excluded from a Monte Carlo estimate."""


class CapabilityError(ManifoldMetricsError, TypeError):
    """The decoder lacks a capability the operation needs (encoder, AD, ...)."""


class FormatError(ManifoldMetricsError, ValueError):
    """A model or decoder file is malformed, truncated or of the wrong version."""


class TrainingError(ManifoldMetricsError, RuntimeError):
    pass


class DivergenceError(TrainingError):
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history


class UsageError(ManifoldMetricsError, ValueError):
    """Invalid user input: bad index set, unknown manifest key, missing file."""
