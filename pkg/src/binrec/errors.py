"""Error taxonomy shared across the package.

Each error family maps to a process exit code so that shell scripts can
distinguish misconfiguration from bad data from numerical blow-ups.
"""

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class BinrecError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(BinrecError):
    """Invalid, inconsistent, or unknown configuration."""

    exit_code = EXIT_CONFIG


class DataError(BinrecError):
    """Malformed input data, missing files, or integrity violations."""

    exit_code = EXIT_DATA


class ParseError(DataError):
    """A ratings line that does not match the declared format."""


class CheckpointError(DataError):
    """Unreadable or incompatible checkpoint / code files."""


class NumericError(BinrecError):
    """Non-finite values where finite ones are required."""

    exit_code = EXIT_NUMERIC


class ShapeError(BinrecError):
    """Operands with incompatible shapes passed to a numerical operation."""

    exit_code = EXIT_NUMERIC
