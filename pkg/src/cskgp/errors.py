"""Exception hierarchy.

Errors are split into validation failures (bad input, exit code 1 on the
command line) and numerical failures (exit code 2).
"""


class CSKError(Exception):
    """Base class for all package errors."""


class ValidationError(CSKError, ValueError):
    """Input violates a documented precondition."""


class NumericalError(CSKError, ArithmeticError):
    """A numerical routine could not produce a finite result."""


class FactorizationFailed(NumericalError):
    pass


class NonFiniteIntegrand(NumericalError):
    pass


class DimensionMismatch(ValidationError):
    pass


class NonPositiveLengthscale(ValidationError):
    pass


class FieldUnavailable(ValidationError):
    pass


class EmptyWindow(ValidationError):
    pass


class UntrainedModel(ValidationError):
    pass


class ParseError(ValidationError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MissingTarget(ValidationError):
    pass


class DegenerateColumn(ValidationError):
    pass


class IoError(CSKError, OSError):
    pass
