"""Exception hierarchy shared across the package.

Each class carries the process exit code the CLI reports for it.
"""


class CaliberError(Exception):
    exit_code = 1


class DomainError(CaliberError, ValueError):
    """Input outside the mathematical domain of an operation."""

    exit_code = 4


class DimensionError(CaliberError, ValueError):
    exit_code = 4


class ConfigError(CaliberError, ValueError):
    exit_code = 2


class ContextError(CaliberError):
    """No usable audio context (e.g. every frame masked)."""

    exit_code = 3


class InputError(CaliberError, ValueError):
    exit_code = 3


class FormatError(CaliberError):
    exit_code = 3


class NumericError(CaliberError, ArithmeticError):
    exit_code = 4


class TrainingError(NumericError):
    exit_code = 4


class MetricError(CaliberError, ValueError):
    exit_code = 4
