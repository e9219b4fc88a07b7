"""Exception hierarchy shared by all dpplkit modules."""


class DpplError(Exception):
    """Base class for every error raised by dpplkit."""


class InvalidArgumentError(DpplError, ValueError):
    """An input violates a documented precondition."""


class ConstraintError(InvalidArgumentError):
    """A constraint specification is malformed or rank deficient."""


class GradientUndefinedError(DpplError, ArithmeticError):
    """A derivative was requested where it does not exist (e.g. sigma == 0)."""


class ConvergenceError(DpplError):
    """An iterative solver stopped before meeting its tolerance.

    The solver trace is attached as ``trace`` for post-mortem inspection.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class ProjectionFailure(DpplError):
    """Projection of one row/sample of a batch failed."""

    def __init__(self, index, cause):
        super().__init__(f"projection failed at index {index}: {cause}")
        self.index = index
        self.cause = cause


class DivergenceError(DpplError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, loss):
        super().__init__(f"loss became non-finite ({loss!r}) at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss
