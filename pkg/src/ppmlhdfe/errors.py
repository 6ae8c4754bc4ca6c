"""Exception hierarchy for the ppmlhdfe package."""


class PpmlhdfeError(Exception):
    """Base class for all package errors."""


class DataError(PpmlhdfeError):
    """Problems with the input data (missing files, bad values, ragged rows)."""


class SpecificationError(PpmlhdfeError):
    """Invalid model specification (absorb grammar, role conflicts, flags)."""


class EstimationError(PpmlhdfeError):
    """Estimation cannot proceed or produce a usable result."""


class DivergenceError(EstimationError):
    """Linear predictor diverged; the likelihood probably has no maximum.

    Usually a symptom of separated observations that were not dropped.
    """


class ProjectionNotConverged(EstimationError):
    """Alternating projections exhausted ``max_sweeps``.

    Carries the best iterate so callers can inspect or salvage it.
    """

    def __init__(self, message, best=None, sweeps=0):
        super().__init__(message)
        self.best = best
        self.sweeps = sweeps
