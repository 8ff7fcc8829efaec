"""Exception types shared across the package."""


class LMMError(Exception):
    """Base class for all package errors."""


class InvalidInputError(LMMError, ValueError):
    pass


class InvalidDistributionError(LMMError, ValueError):
    pass


class DimensionError(LMMError, ValueError):
    pass


class ParseError(LMMError, ValueError):
    """Raised when a feature file cannot be parsed; carries the line number."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TraceMismatchError(LMMError):
    pass


class NonFiniteError(LMMError, FloatingPointError):
    pass


class CountUnderflowError(LMMError, RuntimeError):
    pass
