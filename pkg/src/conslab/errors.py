"""Exception types shared across the package."""


class ConslabError(Exception):
    """Base class for all package errors."""


class DomainError(ConslabError, ValueError):
    """An argument lies outside the mathematical domain of a function."""


class DataError(ConslabError, ValueError):
    """Input data violates a contract (labels out of range, bad normalization...)."""


class StructuralError(ConslabError, ValueError):
    """Shapes or network structure are inconsistent."""


class NumericError(ConslabError, ArithmeticError):
    """A non-finite value appeared during training."""


class ConfigError(ConslabError, ValueError):
    """A configuration document is malformed."""
