"""Exception types shared by the functionals."""

from __future__ import annotations


class ShapeError(ValueError):
    """Operand shapes violate an op's shape contract."""


class SolverError(RuntimeError):
    """A numerical solver failed (singular system, stagnation, non-finite state).

    ``residual`` carries the last residual norm when one is available.
    """

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


class ConvergenceError(SolverError):
    """The iteration limit was reached before the tolerance was met."""


class DegenerateError(SolverError):
    """Eigenvector derivative requested for a repeated eigenvalue."""
