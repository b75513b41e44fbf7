"""Exception types shared across the package."""


class FactorFlowError(Exception):
    """Base class for all package errors."""


class ParameterError(FactorFlowError, ValueError):
    """A distribution or model parameter violates its domain."""


class NumericalError(FactorFlowError, ArithmeticError):
    """A numerical routine failed to converge or produced non-finite values."""


class DataError(FactorFlowError, ValueError):
    """Input data is malformed, misaligned, or inconsistent."""
