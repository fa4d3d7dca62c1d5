"""Exception types shared across the package."""


class SepinvError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(SepinvError, ValueError):
    pass


class NonConvergence(SepinvError):
    """Iterative solve hit its iteration cap before reaching tolerance."""


class FactorizationFailure(SepinvError):
    """Cholesky of the small n x n system failed even after jitter."""


class InvalidWeights(SepinvError, ValueError):
    pass


class EmptySupport(SepinvError):
    """Rejection sampling could not find a point inside the prior support."""


class DegenerateGeometry(SepinvError, ValueError):
    pass


class ConfigError(SepinvError, ValueError):
    pass


class SamplerAborted(SepinvError):
    """Too many numerical incidents during a chain run."""


class BudgetExhausted(SepinvError):
    """Optimizer budget ran out. ``best`` holds the best point found so far."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best
