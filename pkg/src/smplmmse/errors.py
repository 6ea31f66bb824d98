"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid parameters or configuration; CLI exit code 1."""


class DomainError(ValueError):
    """Argument outside the mathematical domain of an operation."""


class NumericalDegeneracyError(ArithmeticError):
    """A factorization or variance became singular; CLI exit code 2."""
