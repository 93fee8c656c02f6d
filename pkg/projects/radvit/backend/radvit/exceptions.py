"""
Exceptions raised by radvit.

Each exception carries the exit code used by the command line
when the error reaches the top level.
"""
from typing import Optional

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_NUMERIC = 5


class RadvitException(Exception):

    exit_code = 1
    category = "Unexpected"

    def __init__(self, message: str, exit_code: Optional[int] = None) -> None:
        super().__init__(message)
        self.message = message
        if exit_code is not None:
            self.exit_code = exit_code

    def __str__(self) -> str:
        return self.message


class UsageError(RadvitException):
    exit_code = EXIT_USAGE
    category = "Usage"


class ConfigError(RadvitException):
    exit_code = EXIT_CONFIG
    category = "Config"


class DomainError(RadvitException, ValueError):
    exit_code = EXIT_CONFIG
    category = "Domain"


class RangeError(RadvitException, ValueError):
    exit_code = EXIT_CONFIG
    category = "Range"


class DataError(RadvitException):
    exit_code = EXIT_DATA
    category = "Data"


class IntegrityError(RadvitException):
    exit_code = EXIT_DATA
    category = "Integrity"


class ShapeError(RadvitException, ValueError):
    exit_code = EXIT_DATA
    category = "Shape"


class NumericError(RadvitException):
    exit_code = EXIT_NUMERIC
    category = "Numeric"
