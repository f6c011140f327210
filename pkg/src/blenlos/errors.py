"""Exception hierarchy.

The CLI maps each family to an exit code: configuration problems to 2,
bad input data to 3 and numerical failures to 4.
"""


class BlenlosError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(BlenlosError, ValueError):
    exit_code = 2


class DataError(BlenlosError, ValueError):
    exit_code = 3


class ParseError(DataError):
    """Malformed input file; carries the offending line number."""

    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")


class NumericalError(BlenlosError, ArithmeticError):
    exit_code = 4


class DegenerateModelError(NumericalError):
    pass


class EPConvergenceError(NumericalError):
    """EP did not reach its fixed point; ``diagnostics`` holds the last iterate."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class DomainError(BlenlosError, ValueError):
    """Argument outside the mathematical domain of a function."""

    exit_code = 3
