"""Exception hierarchy. Each class maps to a CLI exit code."""


class GradspaceError(Exception):
    exit_code = 1


class ConfigError(GradspaceError, ValueError):
    """Inconsistent dimensions, bad config values, out-of-range options."""

    exit_code = 2


class UsageError(GradspaceError, ValueError):
    """An operation was called in a state that does not support it."""

    exit_code = 2


class DataError(GradspaceError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ProvenanceError(DataError):
    """Artifacts derived from different base checkpoints were mixed."""


class NumericError(GradspaceError, ArithmeticError):
    exit_code = 4


class TrainingError(NumericError):
    def __init__(self, message, epoch=None, batch=None):
        where = []
        if epoch is not None:
            where.append(f"epoch {epoch}")
        if batch is not None:
            where.append(f"batch {batch}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class MetricError(NumericError):
    """The metric could not be factorized at the requested ridge."""
