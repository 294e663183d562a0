"""Exception hierarchy shared by every module."""


class BNPMetaError(Exception):
    """Base class for all package errors."""


class SchemaError(BNPMetaError):
    """A required column or configuration key is missing."""


class ParseError(BNPMetaError):
    """A field could not be parsed as a number."""


class DomainError(BNPMetaError, ValueError):
    """An input lies outside the domain of the operation."""


class ZeroCellError(DomainError):
    """A 2x2 table has an empty cell."""


class DegenerateError(BNPMetaError, ValueError):
    """The input has no spread (zero variance, constant column, ...)."""


class DegenerateCovariateError(DegenerateError):
    pass


class InsufficientDataError(BNPMetaError, ValueError):
    """Too few observations for the requested computation."""


class NumericalError(BNPMetaError, ArithmeticError):
    """A linear-algebra or sampling step failed numerically."""


class DatasetMismatchError(BNPMetaError):
    """Draws or reports refer to a different dataset."""
