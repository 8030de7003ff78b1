"""Exception types shared across the package.

Every error carries its class name as a stable, machine-parseable code; the
CLI prints it on failure.
"""


class QSpaceError(Exception):
    """Base class for all package errors."""

    @property
    def code(self) -> str:
        return type(self).__name__


class ConfigError(QSpaceError):
    pass


class BadDataset(QSpaceError):
    pass


class FormatVersionError(BadDataset):
    pass


class ShapeMismatch(BadDataset):
    pass


class NonFiniteValues(BadDataset):
    pass


class EmptySlice(QSpaceError):
    pass


class EmptyRoi(QSpaceError):
    pass


class InsufficientData(QSpaceError):
    pass


class ClassExhausted(QSpaceError):
    pass


class UndefinedMetric(QSpaceError):
    pass


class TrainingDiverged(QSpaceError):
    pass


class UsageError(QSpaceError):
    """Raised when an API is called out of order (e.g. backward before forward)."""
