"""Exception hierarchy shared by all falkdet modules."""


class FalkdetError(Exception):
    """Base class for every error raised by this package."""


class InputError(FalkdetError, ValueError):
    """Malformed or inconsistent input (shapes, dimensions, ranges)."""


class ConfigError(InputError):
    """Infeasible or incomplete configuration."""


class IngestionError(InputError):
    """A dataset or model file could not be parsed.

    The message always names the offending file and, when available,
    the line number or byte offset.
    """


class NumericalError(FalkdetError, ArithmeticError):
    """A linear system could not be factorized even after jitter repair."""


class ConvergenceWarning(UserWarning):
    """Iterative solver stopped at the iteration cap before the tolerance."""
