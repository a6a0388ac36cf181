"""Exception hierarchy shared by every edgeguard module."""


class EdgeGuardError(Exception):
    """Base class for all library errors."""


class DimensionError(EdgeGuardError, ValueError):
    """Array shapes are inconsistent with the requested operation."""


class ParameterError(EdgeGuardError, ValueError):
    """A hyperparameter or argument is outside its valid range."""


class StateError(EdgeGuardError, RuntimeError):
    """An operation was called out of order (e.g. backward before forward)."""


class NumericalError(EdgeGuardError, ArithmeticError):
    """A loss or gradient became NaN or infinite.

    ``checkpoint`` carries the last parameters known to be finite, when available.
    """

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class IngestionError(EdgeGuardError, ValueError):
    """Input data could not be parsed against its schema."""


class ModelFileError(EdgeGuardError, ValueError):
    """A serialized model or feature matrix is malformed, truncated or of the wrong version."""


class ProtocolError(EdgeGuardError, ValueError):
    """Federated updates are incongruent with each other or with the global model."""


class ThresholdError(EdgeGuardError, ValueError):
    """A threshold profile cannot be satisfied on the given validation scores."""

    def __init__(self, message, frontier=None):
        super().__init__(message)
        self.frontier = frontier or []


class ConfigError(EdgeGuardError, ValueError):
    """A run configuration is invalid."""
