"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Invalid argument or configuration value."""


class DimensionMismatchError(ValidationError):
    """Operands have incompatible shapes."""


class IntegrationError(RuntimeError):
    """A time-integration step failed to converge.

    Attributes:
        iterate: the last fixed-point iterate, when available.
    """

    def __init__(self, message, iterate=None):
        super().__init__(message)
        self.iterate = iterate


class DivergenceError(RuntimeError):
    """Non-finite state encountered during an analysis or a run.

    Attributes:
        step: index of the step at which the state became non-finite.
    """

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class LinearSolveError(RuntimeError):
    """An innovation-matrix factorization or solve failed."""
