"""Exception hierarchy.

Input problems derive from :class:`InputError` (CLI exit code 2); numerical
problems derive from :class:`ComputationError` (CLI exit code 1).
"""

from __future__ import annotations


class CausemortError(Exception):
    """Base class for all package errors."""


class InputError(CausemortError):
    pass


class ComputationError(CausemortError):
    pass


class MalformedCode(InputError):
    pass


class UnknownCode(InputError):
    pass


class SchemaError(InputError):
    """Bad header or row in an input file."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)


class GapError(SchemaError):
    """A required cell (typically an exposure) is missing."""


class RangeError(SchemaError):
    """A year falls outside the configured span."""


class MissingWhoCell(InputError):
    pass


class MissingCoefficient(InputError):
    """A surface cell lacks a coefficient needed to evaluate rates."""


class RankDeficient(ComputationError):
    pass


class DegenerateSeries(ComputationError):
    """Log of a zero rate was requested."""


class DegenerateDenominator(ComputationError):
    pass


class NonPositiveRate(ComputationError):
    pass


class StatisticFailure(ComputationError):
    def __init__(self, iteration: int, cause: BaseException):
        self.iteration = iteration
        self.cause = cause
        super().__init__(f"statistic failed at bootstrap iteration {iteration}: {cause!r}")
