"""Exception types shared across the package.

The CLI maps these onto exit codes: :class:`ConfigError` -> 1,
:class:`DataError` -> 2, :class:`NumericalError` -> 3.
"""


class BinauralSIError(Exception):
    """Base class for all package errors."""


class ConfigError(BinauralSIError, ValueError):
    """Configuration could not be parsed or violates the schema."""


class DataError(BinauralSIError, ValueError):
    """Input data is missing, malformed or has the wrong format."""


class ShapeError(DataError):
    """Array or tensor shapes are incompatible."""


class UndefinedCorrelationError(DataError):
    """A correlation was requested on a constant sequence."""


class NumericalError(BinauralSIError, ArithmeticError):
    """A computation produced a non-finite value."""
