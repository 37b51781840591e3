"""Exception hierarchy shared by all modules.

Two top-level families map onto the CLI exit codes: :class:`InputError`
(exit code 2) for anything wrong with user-supplied files, formulas, or
configuration, and :class:`NumericalError` (exit code 3) for failures of
the numerics themselves.
"""

from __future__ import annotations


class RulerobError(Exception):
    """Base class for all library errors."""


class InputError(RulerobError):
    """Invalid user input: files, formulas, configuration, arguments."""

    exit_code = 2


class NumericalError(RulerobError):
    """A numerical procedure failed (factorization, optimization, ...)."""

    exit_code = 3


class FormulaSyntaxError(InputError):
    """Raised by the formula parser; carries the character position."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class UnknownPredicateError(InputError):
    pass


class HorizonError(InputError):
    """A bounded temporal operator needs steps beyond the signal end."""


class SchemaError(InputError):
    """A scenario/config file violates its schema; carries the field path."""

    def __init__(self, message: str, path: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class ProjectionError(InputError):
    """Point cannot be projected onto the reference path unambiguously."""


class OffRoadError(InputError):
    """Vehicle footprint does not intersect any lane."""


class CalibrationError(InputError):
    """Normalization constants cannot be computed from the given data."""


class EmptyFeasibleSetError(NumericalError):
    """No kinematically feasible ego sample exists for the query state."""


class FactorizationError(NumericalError):
    """Gram matrix could not be factorized even with maximum jitter."""


class ModelFileError(InputError):
    """Surrogate model file is corrupted, truncated, or incompatible."""


class NoCollisionFreeSampleError(NumericalError):
    """Planner found no collision-free candidate; carries diagnostics."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
