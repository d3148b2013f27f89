"""Exception types shared across the toolkit."""


class GrapeError(Exception):
    """Base class for all toolkit errors."""


class InvalidArgumentError(GrapeError, ValueError):
    """An argument violates a documented precondition."""


class NumericFailureError(GrapeError, RuntimeError):
    """A numeric routine failed to produce a usable result."""

    def __init__(self, message: str, iterations: int | None = None):
        super().__init__(message)
        self.iterations = iterations


class CalibrationError(GrapeError, ValueError):
    """Privacy parameters fall outside the validity range of the closed form."""


class ConfigurationError(GrapeError, RuntimeError):
    """A run is wired up inconsistently (missing noise scale, tracker off, ...)."""


class FormatError(GrapeError, ValueError):
    """A binary input file is malformed; ``offset`` is the failing byte position."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message)
        self.offset = offset
