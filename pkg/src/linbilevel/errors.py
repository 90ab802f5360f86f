"""Exception types shared by every solver in the package."""

from __future__ import annotations

import numpy as np


class InputError(ValueError):
    """Bad dimensions, non-positive parameters, malformed files."""


class ConfigError(InputError):
    """A solver configuration that cannot run (for instance K = 0)."""


class EvaluationError(ArithmeticError):
    """An oracle returned NaN or Inf."""


class FactorizationError(np.linalg.LinAlgError):
    """A constraint matrix is numerically rank deficient."""


class DegeneracyError(np.linalg.LinAlgError):
    """The reduced KKT system is singular or strict complementarity fails."""

    def __init__(self, message: str, condition: float | None = None, indices=()):
        super().__init__(message)
        self.condition = condition
        self.indices = tuple(indices)


class ConvergenceError(RuntimeError):
    """An iterative solver stopped before its certificate was met.

    ``best`` holds the best iterate seen (by certificate residual) and
    ``residual`` its residual, so callers can decide whether to accept it.
    """

    def __init__(self, message: str, best=None, residual: float = float("inf"), iterations: int = 0):
        super().__init__(message)
        self.best = best
        self.residual = residual
        self.iterations = iterations
