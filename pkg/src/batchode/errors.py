"""Exception hierarchy shared by all modules."""


class BatchOdeError(Exception):
    """Base class for every error raised by batchode."""


class NonFiniteInput(BatchOdeError, ValueError):
    pass


class LengthMismatch(BatchOdeError, ValueError):
    pass


class EmptyTermList(BatchOdeError, ValueError):
    pass


class EmptyBatch(BatchOdeError, ValueError):
    pass


class DoubleRelease(BatchOdeError, RuntimeError):
    pass


class RhsFailure(BatchOdeError, RuntimeError):
    """A right-hand side evaluation could not be completed.

    Inside the integrators this is treated as recoverable: the step is cut
    and retried, as for a nonlinear convergence failure.
    """


class NonPositiveTemperature(RhsFailure):
    pass


class NotProvided(BatchOdeError, LookupError):
    pass


class LayoutMismatch(BatchOdeError, ValueError):
    pass


class SingularBlock(BatchOdeError, ArithmeticError):
    def __init__(self, cell_index):
        super().__init__(f"zero pivot in block of cell {cell_index}")
        self.cell_index = cell_index


class IntegrationError(BatchOdeError, RuntimeError):
    """Integrator gave up. ``t`` is the time reached, ``batch_id`` is set by the batch driver."""

    def __init__(self, msg, t=None, batch_id=None):
        super().__init__(msg)
        self.t = t
        self.batch_id = batch_id


class TooMuchWork(IntegrationError):
    pass


class StepTooSmall(IntegrationError):
    pass


class RepeatedConvergenceFailure(IntegrationError):
    pass


class RepeatedErrorTestFailure(IntegrationError):
    pass


class IntegrationTimeout(IntegrationError):
    pass


class GridMismatch(BatchOdeError, ValueError):
    pass


class ReferenceFailed(BatchOdeError, RuntimeError):
    pass
