"""Exception types shared across the package."""


class SparseTrainError(ValueError):
    """Base class for all package errors."""


class DimensionError(SparseTrainError):
    """Tensor shapes don't line up."""


class ConfigurationError(SparseTrainError):
    """Invalid model or run configuration."""


class ConsistencyError(SparseTrainError):
    """Masks, plans, or group indices are stale w.r.t. the graph."""


class FormatError(SparseTrainError):
    """Malformed checkpoint or dataset file."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SetupError(SparseTrainError):
    """Penalty-coefficient setup called with degenerate inputs."""


class InputError(SparseTrainError):
    """Bad runtime input (e.g. out-of-range label)."""
