"""Exception hierarchy.

Every error raised by the library derives from :class:`HodgeMixError`.  The
CLI maps the three families below onto process exit codes.
"""

from __future__ import annotations


class HodgeMixError(Exception):
    exit_code = 1


class InputError(HodgeMixError, ValueError):
    """Bad data, bad arguments or an invalid configuration."""

    exit_code = 2


class NumericalError(HodgeMixError, ArithmeticError):
    exit_code = 3


class IndexOutOfRange(InputError, IndexError):
    pass


class SelfComparison(InputError):
    pass


class NonFiniteResponse(InputError):
    pass


class NegativeWeight(InputError):
    pass


class DimensionMismatch(InputError):
    pass


class MalformedRow(InputError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnknownChoiceToken(MalformedRow):
    pass


class EmptyFile(InputError):
    pass


class UnknownAnnotator(InputError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its argument otherwise
        return str(self.args[0]) if self.args else ""


class TOutOfRange(InputError):
    pass


class TooFewRecords(InputError):
    pass


class ConfigError(InputError):
    pass


class ConfigUnstable(ConfigError):
    """The explicit step size violates ``alpha * kappa * ||X^T X|| / m < 2``."""


class SolverDidNotConverge(NumericalError):
    def __init__(self, message: str, iterations: int | None = None, residual: float | None = None):
        self.iterations = iterations
        self.residual = residual
        super().__init__(message)
