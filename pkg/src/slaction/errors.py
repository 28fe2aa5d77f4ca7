"""Typed errors shared across the package.

Every malformed input or bad configuration maps to one of these; callers
(notably the CLI) can rely on the hierarchy for exit-code mapping.
"""


class SlactionError(Exception):
    """Base class for all package errors."""


class FormatError(SlactionError):
    """A file on disk does not match its documented format."""


class EmptyNightError(FormatError):
    """A night directory contains no frames."""


class OrderingError(FormatError):
    """Frame indices are missing, duplicated, or out of order."""


class ValidationError(SlactionError):
    """Well-formed input with invalid values."""


class ConfigurationError(SlactionError):
    """Invalid configuration or plan."""


class ShapeError(SlactionError):
    """Array dimensions do not match."""


class MetricUndefinedError(SlactionError):
    """A metric has no defined value for this input (e.g. single-class AUC)."""


class TrainingError(SlactionError):
    """Training cannot proceed (e.g. single-class dataset)."""


class DivergenceError(TrainingError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class RankError(SlactionError):
    """Design matrix is rank deficient (e.g. all-equal regressors)."""


class ConvergenceError(SlactionError):
    """An iterative solver failed to converge; carries the last iterate."""

    def __init__(self, message: str, last_iterate=None, iterations: int | None = None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.iterations = iterations
