class DynatrajError(Exception):
    """Base class for package errors."""


class DomainError(DynatrajError, ValueError):
    """A time or input lies outside the domain an operation accepts."""


class ParameterError(DynatrajError, ValueError):
    """Model parameters are inconsistent or violate an invariant."""


class NumericalError(DynatrajError, ArithmeticError):
    """A factorization or solve failed even after jitter escalation."""

    def __init__(self, message, ladder=None, individual=None):
        super().__init__(message)
        self.ladder = list(ladder) if ladder is not None else []
        self.individual = individual


class LearningError(DynatrajError, RuntimeError):
    """Every EM restart failed."""


class InputError(DynatrajError, ValueError):
    """Malformed input file."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line
