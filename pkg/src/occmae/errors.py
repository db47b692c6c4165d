"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class OccMAEError(Exception):
    exit_code = 1


class ConfigError(OccMAEError, ValueError):
    exit_code = 2


class DataError(OccMAEError, ValueError):
    exit_code = 3


class FormatError(DataError):
    """Malformed binary file; ``offset`` is the first byte that cannot be parsed."""

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class ConsistencyError(DataError):
    pass


class BoundsError(OccMAEError, IndexError):
    exit_code = 3


class NumericError(OccMAEError, ArithmeticError):
    exit_code = 4


class IncompatibleError(DataError):
    """Checkpoint/encoder file does not match the expected schedule or version."""
