"""Exception hierarchy. The CLI maps each class to an exit code."""


class RangingError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(RangingError):
    exit_code = 2


class DataError(RangingError):
    """Input data violates the schema or an operation's precondition."""

    exit_code = 3


class SchemaError(DataError):
    pass


class NumericError(RangingError):
    """Rank deficiency, non-physical fit, or other numerical failure."""

    exit_code = 4
