"""Exception types shared across the package."""


class KwmError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(KwmError, ValueError):
    """Operand dimensions are incompatible."""


class ConfigError(KwmError, ValueError):
    """A configuration value is invalid or inconsistent."""


class DataError(KwmError, ValueError):
    """Input data is malformed, missing, or out of range."""


class NumericDomainError(KwmError, ArithmeticError):
    """A numeric precondition (finiteness, positivity) does not hold."""


class UsageError(KwmError, RuntimeError):
    """An API was called in a way its contract does not allow."""


class FormatError(DataError):
    """A binary file could not be decoded."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
