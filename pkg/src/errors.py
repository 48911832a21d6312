"""
Exception hierarchy for sdfrecon.

Each failure family maps to one command-line exit code, see ``exit_code_for``.
"""

from __future__ import annotations


class SdfReconError(Exception):
    """Base class for all pipeline errors."""

    exit_code = 1


class UsageError(SdfReconError):
    """Command-line misuse: unknown subcommand, flag or missing argument."""

    exit_code = 1


class ConfigError(SdfReconError, ValueError):
    """Invalid configuration key/value or inconsistent network shapes."""

    exit_code = 1


class DomainError(SdfReconError, ValueError):
    """A numeric precondition was violated (pixel outside image, beta <= 0, ...)."""

    exit_code = 1


class ContractError(SdfReconError, TypeError):
    """The differentiation API was used outside its contract."""

    exit_code = 1


class DataError(SdfReconError):
    """Malformed dataset, file or inconsistent on-disk artifacts.

    Attributes:
        violations: Every problem found, one human readable line each.
    """

    exit_code = 2

    def __init__(self, message: str, violations: list[str] | None = None):
        self.violations = list(violations or [])
        if self.violations:
            message = message + '\n  - ' + '\n  - '.join(self.violations)
        super().__init__(message)


class NumericalError(SdfReconError, ArithmeticError):
    """A loss term, gradient or parameter became non-finite.

    Attributes:
        term: Name of the offending quantity.
    """

    exit_code = 3

    def __init__(self, message: str, term: str = ''):
        self.term = term
        super().__init__(message)


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the documented process exit code."""
    if isinstance(error, SdfReconError):
        return error.exit_code
    return 1
