"""Exception hierarchy. Each family maps onto one CLI exit code."""


class SemcsError(Exception):
    exit_code = 1


class InputError(SemcsError, ValueError):
    """Bad user input: shapes, ranges, malformed prompts, missing files."""

    exit_code = 2


class ConfigurationError(SemcsError):
    """Missing weights, unknown backend kinds, unreadable config files."""

    exit_code = 3


class NumericalError(SemcsError, ArithmeticError):
    """Non-finite losses, eigensolver failures."""

    exit_code = 4

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class DegenerateSegmentationError(NumericalError):
    """Fiedler vector is numerically constant; no bipartition exists."""


class DegenerateDirectionError(NumericalError):
    """A direction vector has (near) zero norm, so the cosine is undefined."""
