"""Exception types shared across the package."""


class RiskCEMError(Exception):
    """Base class for all package errors."""


class InvalidInputError(RiskCEMError, ValueError):
    """Raised when arguments violate an operation's preconditions."""


class NumericError(RiskCEMError, ArithmeticError):
    """Raised when a computation produces non-finite values."""


class PlannerFailure(RiskCEMError):
    """Raised when every candidate in a planning round scored non-finite."""
