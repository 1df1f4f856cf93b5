"""Exception hierarchy shared by all modules."""


class GcFpcaError(Exception):
    """Base class for errors raised by this package."""


class DomainError(GcFpcaError, ValueError):
    """Evaluation point lies outside the domain of a basis or eigensystem."""


class ValidationError(GcFpcaError, ValueError):
    """Malformed input data, arguments or configuration."""


class FitError(GcFpcaError):
    """A model could not be fitted (rank deficiency, degenerate data)."""


class ConvergenceError(FitError):
    """An iterative fit diverged or failed to converge.

    The iteration trace, when available, is attached as ``trace``.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []
