"""Exception types shared across the package."""


class ConvergenceError(RuntimeError):
    """An iterative solver stopped without meeting its tolerance.

    ``last`` holds the final iterate so callers can inspect or report it.
    """

    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last


class StepSizeError(RuntimeError):
    """Adaptive integration needed a step below the floating-point floor."""

    def __init__(self, message, time):
        super().__init__(message)
        self.time = time


class PreconditionError(ValueError):
    """Inputs are well formed but violate an operation's precondition."""
