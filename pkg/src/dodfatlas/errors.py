"""Exception hierarchy shared by the library and the CLI.

Each family maps to one CLI exit code.
"""


class AtlasError(Exception):
    exit_code = 1


class ValidationError(AtlasError, ValueError):
    """Bad input: domain violations, malformed schemes, manifests, grids."""

    exit_code = 2


class NumericalError(AtlasError, ArithmeticError):
    """A computation could not produce a well-defined result."""

    exit_code = 3


class FormatError(AtlasError, IOError):
    """Unreadable or corrupt file on disk."""

    exit_code = 4


class DegenerateDesignError(NumericalError):
    """Mixed model is not identifiable; ``fallback`` holds the OLS result."""

    def __init__(self, message, fallback=None):
        super().__init__(message)
        self.fallback = fallback
