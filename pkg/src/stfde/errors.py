"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class STFDEError(Exception):
    """Base class for errors raised by :mod:`stfde`."""


class DomainError(STFDEError, ValueError):
    """An argument lies outside the domain where an operation is defined."""


class RegimeError(DomainError):
    """A scenario was handed to a solver for a different regime."""


class GridMismatchError(STFDEError, ValueError):
    """Two grid-aligned objects do not share the same time grid."""


class AccuracyError(STFDEError, ArithmeticError):
    """An internal error estimate exceeded the requested tolerance."""

    def __init__(self, message: str, estimate: float | None = None) -> None:
        super().__init__(message)
        self.estimate = estimate


class ConvergenceError(STFDEError, RuntimeError):
    """An iterative or adaptive procedure failed to converge."""

    def __init__(self, message: str, estimate: float | None = None) -> None:
        super().__init__(message)
        self.estimate = estimate


class StageError(STFDEError):
    """Failure inside one stage of a multi-stage pipeline."""

    def __init__(self, stage: str, cause: BaseException) -> None:
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
