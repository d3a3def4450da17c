"""Exception types raised across the package.

Each family maps onto one CLI exit code (see :mod:`npsemiseg.cli`).
"""


class NPSemiSegError(Exception):
    """Base class for all package errors."""


class ConfigError(NPSemiSegError, ValueError):
    pass


class DataError(NPSemiSegError, ValueError):
    pass


class FormatError(DataError):
    """A persisted file does not match the expected layout or model config."""


class GenerationError(DataError):
    pass


class ShapeError(NPSemiSegError, ValueError):
    pass


class NumericError(NPSemiSegError, ArithmeticError):
    pass


class AggregationError(NPSemiSegError, ValueError):
    """Attention aggregation was requested with no populated centers."""


class LossUndefinedError(NumericError):
    pass


class MetricUndefinedError(NPSemiSegError, ValueError):
    pass


class CoverageError(NPSemiSegError, ValueError):
    """Sliding-window geometry leaves pixels uncovered."""


class OracleError(NumericError):
    """The finite-difference oracle evaluated a non-finite objective."""
