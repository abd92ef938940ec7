"""Adaptive explicit Runge-Kutta with an embedded 4(3) pair (Zonneveld).

The fourth-order weights propagate the solution; the third-order embedded
weights supply the local error estimate, which goes through the same WRMS
acceptance test as the BDF integrator.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .. import kernels
from ..core import IntegratorStats, ToleranceSpec, VectorPool
from ..errors import IntegrationTimeout, RhsFailure, StepTooSmall, TooMuchWork
from ..layout import Layout
from .controller import initial_step
from .problem import BatchProblem


@dataclass(frozen=True)
class ErkTableau:
    c: np.ndarray
    a: np.ndarray
    b: np.ndarray
    b_hat: np.ndarray
    order: int
    embedded_order: int

    @property
    def stages(self):
        return len(self.c)

    @property
    def b_err(self):
        return self.b - self.b_hat


def zonneveld43() -> ErkTableau:
    a = np.zeros((5, 5))
    a[1, 0] = 0.5
    a[2, 1] = 0.5
    a[3, 2] = 1.0
    a[4, :4] = [5.0 / 32.0, 7.0 / 32.0, 13.0 / 32.0, -1.0 / 32.0]
    return ErkTableau(
        c=np.array([0.0, 0.5, 0.5, 1.0, 0.75]),
        a=a,
        b=np.array([1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0, 0.0]),
        b_hat=np.array([-0.5, 7.0 / 3.0, 7.0 / 3.0, 13.0 / 6.0, -16.0 / 3.0]),
        order=4, embedded_order=3)


ZONNEVELD = zonneveld43()


@dataclass(frozen=True)
class ErkControllerConfig:
    safety: float = 0.9
    growth_cap: float = 10.0
    reduction_floor: float = 0.2
    h_min_factor: float = 1e-30


class ErkIntegrator:
    """Single-threaded explicit integrator for one lockstep batch."""

    def __init__(self, system, tableau: ErkTableau = ZONNEVELD, *, n_cells=1, layout=Layout.CY,
                 controller: ErkControllerConfig = ErkControllerConfig(), h_max=math.inf,
                 max_steps=5_000_000, pool: VectorPool | None = None):
        self.system = system
        self.tableau = tableau
        self.n_cells = int(n_cells)
        self.layout = Layout.parse(layout)
        self.controller = controller
        self.h_max = h_max
        self.max_steps = max_steps
        self.pool = pool if pool is not None else VectorPool()

    def integrate(self, y0, t0, t_end, tol: ToleranceSpec, f_ext=None, *, fixed_step=None,
                  deadline=None, record_steps=None):
        if not t_end > t0:
            raise ValueError("t_end must exceed t0")
        y0 = np.asarray(y0, dtype=float)
        if not np.all(np.isfinite(y0)):
            raise ValueError("y0 must be finite")
        shape = y0.shape
        if y0.ndim == 2:
            self.n_cells = y0.shape[0]
        prob = BatchProblem(self.system, self.n_cells, self.layout, f_ext)
        if y0.size != prob.size:
            raise ValueError(f"y0 has {y0.size} entries, batch expects {prob.size}")
        tab = self.tableau
        s = tab.stages
        pool = self.pool
        K = pool.acquire((s, prob.size))
        vecs = pool.acquire((5, prob.size))
        try:
            y, ynew, ystage, w, atol = vecs
            prob.pack(y0, out=y)
            prob.view(atol)[...] = np.broadcast_to(tol.atol, (prob.n_cells, prob.n_comp))
            stats = IntegratorStats()
            self._run(prob, K, y, ynew, ystage, w, atol, float(tol.rtol), t0, t_end, stats,
                      fixed_step, deadline, record_steps)
            y_end = prob.view(y).copy()
        finally:
            pool.release_all([K, vecs])
        return y_end.reshape(shape), stats

    def _run(self, prob, K, y, ynew, ystage, w, atol, rtol, t0, t_end, stats, fixed_step, deadline,
             record_steps):
        tab = self.tableau
        ctl = self.controller
        s = tab.stages
        span = t_end - t0
        h_min = ctl.h_min_factor * span
        expo = 1.0 / (tab.order + 1)
        b, b_err, a, c = tab.b, tab.b_err, tab.a, tab.c

        kernels.error_weights(y, rtol, atol, w)
        prob.rhs(t0, y, K[0])
        stats.n_rhs_evals += 1
        have_k1 = True
        if fixed_step is not None:
            h = float(fixed_step)
        else:
            h, n_probe = initial_step(prob.rhs, t0, y, K[0], w, span, 1, (ystage, ynew))
            stats.n_rhs_evals += n_probe
        h = min(h, self.h_max)
        t = t0
        rejected_last = False
        while t < t_end:
            if deadline is not None and time.perf_counter() > deadline:
                raise IntegrationTimeout("wall-clock budget exhausted", t=t)
            if stats.n_steps >= self.max_steps:
                raise TooMuchWork(f"more than {self.max_steps} internal steps", t=t)
            if t + 1.0001 * h >= t_end:
                h = t_end - t
                t_new = t_end
            else:
                t_new = t + h
            if h < h_min:
                raise StepTooSmall(f"step size {h:.3e} below minimum", t=t)
            stats.n_attempts += 1
            if not have_k1:
                prob.rhs(t, y, K[0])
                stats.n_rhs_evals += 1
            have_k1 = False
            try:
                for i in range(1, s):
                    kernels.linear_combination(h * a[i, :i], K[:i], ystage)
                    ystage += y
                    stats.n_rhs_evals += 1
                    prob.rhs(t + c[i] * h, ystage, K[i])
            except RhsFailure:
                # an unphysical stage value is handled like a failed error test
                if fixed_step is not None:
                    raise
                err = math.inf
            else:
                err = None
            kernels.linear_combination(h * b, K, ynew)
            ynew += y
            if err is not None:
                pass
            elif fixed_step is not None:
                err = 0.0
            else:
                kernels.linear_combination(h * b_err, K, ystage)
                err = kernels.wrms_norm_kernel(ystage, w)
            if err < 1.0:
                t = t_new
                y[:] = ynew
                stats.n_steps += 1
                if record_steps is not None:
                    record_steps.append(h)
                kernels.error_weights(y, rtol, atol, w)
                if fixed_step is None:
                    eta = ctl.growth_cap if err == 0.0 else min(ctl.growth_cap, ctl.safety * err ** -expo)
                    if rejected_last:
                        eta = min(eta, 1.0)
                    h = min(h * eta, self.h_max)
                rejected_last = False
            else:
                stats.n_err_test_fails += 1
                if not np.isfinite(err):
                    eta = ctl.reduction_floor
                else:
                    eta = max(ctl.reduction_floor, min(0.9, ctl.safety * err ** -expo))
                h *= eta
                rejected_last = True


def integrate_erk(system, y0, t0, t_end, tol: ToleranceSpec, *, f_ext=None, layout=Layout.CY,
                  **options):
    """Integrate one state (n_comp,) or a lockstep batch (n_cells, n_comp) explicitly."""
    y0 = np.asarray(y0, dtype=float)
    n_cells = 1 if y0.ndim == 1 else y0.shape[0]
    run_opts = {k: options.pop(k) for k in ("fixed_step", "deadline", "record_steps") if k in options}
    integ = ErkIntegrator(system, n_cells=n_cells, layout=layout, **options)
    return integ.integrate(y0, t0, t_end, tol, f_ext, **run_opts)
