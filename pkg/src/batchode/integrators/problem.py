from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from ..layout import Layout, cell_view


class LinearSolverKind(str, enum.Enum):
    GMRES = "gmres"
    DIRECT = "direct"


class JacobianSource(str, enum.Enum):
    ANALYTIC = "analytic"
    NUMERICAL = "numerical"


@dataclass(frozen=True)
class SolverChoice:
    """Nonlinear/linear solver stack for the BDF integrator.

    ``GMRES`` means inexact Newton with a matrix-free difference-quotient
    Jv product; ``DIRECT`` means modified Newton with a batched dense LU of
    the Newton matrix built from the chosen Jacobian source.
    """

    linear: LinearSolverKind = LinearSolverKind.DIRECT
    jacobian: JacobianSource = JacobianSource.ANALYTIC

    @classmethod
    def inexact_newton_gmres(cls):
        return cls(LinearSolverKind.GMRES, JacobianSource.NUMERICAL)

    @classmethod
    def modified_newton_direct(cls, jacobian="analytic"):
        return cls(LinearSolverKind.DIRECT, JacobianSource(jacobian))

    @property
    def is_direct(self):
        return self.linear is LinearSolverKind.DIRECT


class BatchProblem:
    """A batch of independent cells presented to an integrator as one flat vector."""

    def __init__(self, system, n_cells, layout=Layout.CY, f_ext=None):
        self.system = system
        self.n_cells = int(n_cells)
        self.n_comp = system.n_comp
        self.layout = Layout.parse(layout)
        self.size = self.n_cells * self.n_comp
        self.f_ext = None
        if f_ext is not None:
            fe = np.broadcast_to(np.asarray(f_ext, dtype=float), (self.n_cells, self.n_comp))
            self.f_ext = None if not np.any(fe) else np.ascontiguousarray(fe)

    def view(self, flat):
        return cell_view(flat, self.n_cells, self.n_comp, self.layout)

    def pack(self, cells, out=None):
        cells = np.asarray(cells, dtype=float).reshape(self.n_cells, self.n_comp)
        if out is None:
            out = np.empty(self.size)
        self.view(out)[...] = cells
        return out

    def rhs(self, t, y, out):
        self.system.rhs(t, self.view(y), self.f_ext, out=self.view(out))
        return out

    def rhs_cells(self, t, y_cells, out_cells):
        self.system.rhs(t, y_cells, self.f_ext, out=out_cells)
        return out_cells

    def expand(self, per_comp):
        """Broadcast a per-component vector to the flat layout."""
        out = np.empty(self.size)
        self.view(out)[...] = np.broadcast_to(per_comp, (self.n_cells, self.n_comp))
        return out
