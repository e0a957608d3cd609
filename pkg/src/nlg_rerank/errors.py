"""Exception types shared across the package.

The CLI maps these onto exit codes: ``ConfigError`` -> 2, ``DataError`` -> 3,
anything else -> 4.
"""


class RerankError(Exception):
    """Base class for all package errors."""


class ConfigError(RerankError):
    """Invalid configuration, caught before any side effects."""


class DataError(RerankError):
    """Malformed or inconsistent input data."""


class ParseError(DataError):
    def __init__(self, path, line_no, message):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{self.path}:{line_no}: {message}")


class TransferModeError(DataError):
    """A metric-scoring call was made on a pool without a reference target."""
