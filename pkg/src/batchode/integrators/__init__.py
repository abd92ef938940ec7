from .bdf import BdfIntegrator, BdfState, MAX_ORDER, integrate_bdf
from .controller import ControllerConfig, initial_step, rejection_factor, select_step_and_order
from .erk import ZONNEVELD, ErkIntegrator, ErkTableau, integrate_erk
from .newton import (JacobianRefresh, NewtonConfig, NewtonEvent, NewtonResult, NewtonStatus,
                     newton_solve, refresh_policy)
from .problem import BatchProblem, JacobianSource, LinearSolverKind, SolverChoice

__all__ = [
    "BdfIntegrator", "BdfState", "MAX_ORDER", "integrate_bdf",
    "ControllerConfig", "initial_step", "rejection_factor", "select_step_and_order",
    "ZONNEVELD", "ErkIntegrator", "ErkTableau", "integrate_erk",
    "JacobianRefresh", "NewtonConfig", "NewtonEvent", "NewtonResult", "NewtonStatus",
    "newton_solve", "refresh_policy",
    "BatchProblem", "JacobianSource", "LinearSolverKind", "SolverChoice",
]
