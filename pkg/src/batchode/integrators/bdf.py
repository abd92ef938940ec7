"""Variable-step, variable-order BDF (orders 1-5) for lockstep batches.

History is kept as backward differences of the solution at the current
step size (quasi-constant step formulation): a step-size change
re-interpolates the difference array instead of recomputing coefficients.
The Newton iteration solves for the correction ``d = y_n - y_pred`` of

    d - c*f(t_n, y_pred + d) + psi = 0,    c = h / alpha_q,

and the local error estimate is ``d / (q + 1)``. Every cell of the batch
shares the step sequence; norms run over the whole batch vector.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .. import kernels
from ..core import IntegratorStats, ToleranceSpec, VectorPool
from ..errors import (IntegrationTimeout, LayoutMismatch, RepeatedConvergenceFailure,
                      RepeatedErrorTestFailure, RhsFailure, StepTooSmall, TooMuchWork)
from ..layout import Layout
from ..linalg import GmresConfig, GmresWorkspace, ScalingOperators, fd_jacobian_cells, gmres_scaled
from .controller import ControllerConfig, initial_step, rejection_factor, select_step_and_order
from .newton import (JacobianRefresh, LinearSolveFailed, NewtonConfig, NewtonEvent,
                     newton_solve, refresh_policy)
from .problem import BatchProblem, JacobianSource, SolverChoice

MAX_ORDER = 5
GAMMA = np.hstack((0.0, np.cumsum(1.0 / np.arange(1, MAX_ORDER + 1))))
ALPHA = GAMMA
ERROR_CONST = 1.0 / np.arange(1, MAX_ORDER + 3)
MAX_CONV_FAILS = 10
MAX_ERR_FAILS = 7


def _interp_matrix(order, factor):
    i = np.arange(1, order + 1)[:, None]
    j = np.arange(1, order + 1)
    m = np.zeros((order + 1, order + 1))
    m[1:, 1:] = (i - 1 - factor * j) / i
    m[0] = 1.0
    return np.cumprod(m, axis=0)


_U = [_interp_matrix(k, 1.0) for k in range(MAX_ORDER + 1)]


def change_history(D, order, factor):
    """Rescale the first ``order+1`` backward differences to step ``factor*h``."""
    RU = _interp_matrix(order, factor).dot(_U[order])
    D[:order + 1] = RU.T.dot(D[:order + 1])


@dataclass
class BdfState:
    t: float = 0.0
    h: float = 0.0
    q: int = 1
    n_equal_steps: int = 0
    jacobian_age: int = 0
    gamma: float = 0.0
    gamma_factored: float = 0.0
    has_jacobian: bool = False


class BdfIntegrator:
    """One integrator instance: owns its work buffers (through ``pool``) and is single-threaded."""

    def __init__(self, system, solver: SolverChoice = SolverChoice(), *, n_cells=1, layout=Layout.CY,
                 newton: NewtonConfig = NewtonConfig(), gmres: GmresConfig = GmresConfig(),
                 controller: ControllerConfig = ControllerConfig(), max_order=MAX_ORDER,
                 h_max=math.inf, max_steps=500_000, pool: VectorPool | None = None, debug=False):
        self.system = system
        self.solver = solver
        self.n_cells = int(n_cells)
        self.layout = Layout.parse(layout)
        if solver.is_direct and self.layout is not Layout.CY:
            raise LayoutMismatch("direct batched solves need cell-major (CY) layout")
        if solver.is_direct and solver.jacobian is JacobianSource.ANALYTIC and system.analytic_jacobian is None:
            raise ValueError(f"model {system.name!r} provides no analytic Jacobian")
        self.newton = newton
        self.gmres = gmres
        self.controller = controller
        self.max_order = int(max_order)
        self.h_max = h_max
        self.max_steps = max_steps
        self.pool = pool if pool is not None else VectorPool()
        self.debug = debug
        self.state = BdfState()

    # ------------------------------------------------------------------ public

    def integrate(self, y0, t0, t_end, tol: ToleranceSpec, f_ext=None, *, fixed_step=None,
                  fixed_order=None, deadline=None, record_steps=None, record_orders=None):
        """Advance from ``t0`` to ``t_end``; returns (y_end, IntegratorStats).

        ``y0`` is a state (n_comp,) or a batch (n_cells, n_comp); the result
        has the same shape. ``fixed_step``/``fixed_order`` pin h and q and
        skip the error test (convergence studies); the startup history then
        comes from a tight explicit integration. ``record_steps`` and
        ``record_orders`` collect h and q of every accepted step.
        """
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
        pool = self.pool
        held = []

        def take(shp, dtype=np.float64):
            a = pool.acquire(shp, dtype)
            held.append(a)
            return a

        work = None
        try:
            N = prob.size
            D = take((MAX_ORDER + 3, N))
            D[:] = 0.0
            vecs = take((10, N))
            bufs = _Buffers(vecs)
            prob.pack(y0, out=D[0])
            prob.view(bufs.atol)[...] = np.broadcast_to(tol.atol, (prob.n_cells, prob.n_comp))
            if self.solver.is_direct:
                m = prob.n_comp
                bufs.jac = take((prob.n_cells, m, m))
                bufs.mat = take((prob.n_cells, m, m))
                bufs.piv = take((prob.n_cells, m), np.int64)
            else:
                work = GmresWorkspace(N, self.gmres.max_iters, pool)
            stats = IntegratorStats()
            self._run(prob, D, bufs, work, tol, t0, t_end, stats, fixed_step, fixed_order,
                      deadline, record_steps, record_orders)
            y_end = prob.view(D[0]).copy()
        finally:
            pool.release_all(held)
            if work is not None:
                work.free()
        return y_end.reshape(shape), stats

    # ------------------------------------------------------------------ internals

    def _run(self, prob, D, b, work, tol, t0, t_end, stats, fixed_step, fixed_order, deadline,
             record_steps, record_orders=None):
        ctl = self.controller
        ncfg = self.newton
        st = self.state = BdfState(t=t0)
        direct = self.solver.is_direct
        numerical_jac = self.solver.jacobian is JacobianSource.NUMERICAL
        rtol = float(tol.rtol)
        span = t_end - t0
        h_min = ctl.h_min_factor * span
        sqrt_n = math.sqrt(prob.size)
        ones = np.ones(MAX_ORDER + 1)
        w, atol, ypred, psi, d, y, f, tmp, tmp2 = (
            b.w, b.atol, b.ypred, b.psi, b.d, b.y, b.f, b.tmp, b.tmp2)

        def rhs(t, yy, out):
            stats.n_rhs_evals += 1
            return prob.rhs(t, yy, out)

        kernels.error_weights(D[0], rtol, atol, w)
        rhs(t0, D[0], f)

        fixed = fixed_step is not None
        if fixed:
            q = int(fixed_order or 1)
            h = float(fixed_step)
            self._bootstrap(prob, D, q, h, t0, tol, f_ext=prob.f_ext)
            st.t = t0 + q * h
            kernels.error_weights(D[0], rtol, atol, w)
        else:
            q = 1
            h, n_probe = initial_step(lambda tt, yy, out: prob.rhs(tt, yy, out), t0, D[0], f, w,
                                      span, 1, (tmp, tmp2))
            stats.n_rhs_evals += n_probe
            h = max(min(h, self.h_max), h_min)
            D[1] = h * f
        st.h, st.q = h, q
        event = NewtonEvent.NONE
        first_change = True
        gamma_scale = 1.0

        while st.t < t_end:
            if deadline is not None and time.perf_counter() > deadline:
                raise IntegrationTimeout("wall-clock budget exhausted", t=st.t)
            if stats.n_steps >= self.max_steps:
                raise TooMuchWork(f"more than {self.max_steps} internal steps", t=st.t)
            if h > self.h_max:
                change_history(D, q, self.h_max / h)
                h = self.h_max
                st.n_equal_steps = 0
            n_conv = 0
            n_err = 0
            while True:
                stats.n_attempts += 1
                if st.t + 1.0001 * h >= t_end:
                    h_new = t_end - st.t
                    if h_new != h:
                        change_history(D, q, h_new / h)
                        st.n_equal_steps = 0
                        h = h_new
                    t_new = t_end
                else:
                    t_new = st.t + h
                if h < h_min:
                    raise StepTooSmall(f"step size {h:.3e} below minimum", t=st.t)

                kernels.linear_combination(ones[:q + 1], D[:q + 1], ypred)
                kernels.linear_combination(GAMMA[1:q + 1] / ALPHA[q], D[1:q + 1], psi)
                c = h / ALPHA[q]
                st.gamma = c
                eps = 1.0 / ERROR_CONST[q]

                fresh = False
                if direct:
                    if refresh_policy(st, event, ncfg) is JacobianRefresh.REBUILD:
                        try:
                            self._setup_direct(prob, b, t_new, ypred, w, c, numerical_jac, stats, rhs)
                            fresh = True
                            st.has_jacobian = True
                            st.jacobian_age = 0
                            st.gamma_factored = c
                        except (RhsFailure, LinearSolveFailed):
                            st.has_jacobian = False
                    # the correction from a matrix built with an older gamma is rescaled
                    gamma_scale = 2.0 / (1.0 + c / st.gamma_factored) if st.has_jacobian else 1.0

                d[:] = 0.0
                y[:] = ypred
                if direct and not st.has_jacobian:
                    result = None
                else:
                    if direct:
                        corr = self._direct_correction(prob, b, t_new, c, gamma_scale, rhs)
                    else:
                        corr = self._gmres_correction(prob, b, work, t_new, c, ncfg.c_eps * eps * sqrt_n,
                                                      rhs, stats)
                    result = newton_solve(corr, y, w, ncfg, eps, on_update=d.__iadd__)
                    stats.n_newton_iters += result.iters

                if result is None or not result.converged:
                    if fixed:
                        raise RepeatedConvergenceFailure("Newton failed in fixed-step mode", t=st.t)
                    if direct and not fresh and st.has_jacobian:
                        # stale Jacobian: rebuild and retry at the same step size
                        event = NewtonEvent.FAILED
                        continue
                    stats.n_conv_fails += 1
                    n_conv += 1
                    if n_conv >= MAX_CONV_FAILS:
                        raise RepeatedConvergenceFailure(
                            f"{n_conv} consecutive nonlinear solver failures", t=st.t)
                    event = NewtonEvent.FAILED
                    factor = ctl.conv_fail_factor
                    h *= factor
                    change_history(D, q, factor)
                    st.n_equal_steps = 0
                    continue

                event = NewtonEvent.NONE
                err = ERROR_CONST[q] * kernels.wrms_norm_kernel(d, w)
                if fixed or err < 1.0:
                    break
                stats.n_err_test_fails += 1
                n_err += 1
                if n_err >= MAX_ERR_FAILS:
                    raise RepeatedErrorTestFailure(f"{n_err} consecutive error-test failures", t=st.t)
                factor = rejection_factor(err, q, n_err, ctl)
                if n_err >= 3:
                    # restart at order 1 from a fresh derivative: rescaled history keeps the
                    # old step's slope, so its error estimate only shrinks linearly with h
                    q = 1
                    h *= ctl.reduction_floor
                    rhs(st.t, D[0], tmp)
                    np.multiply(tmp, h, out=D[1])
                    D[2:] = 0.0
                    st.n_equal_steps = 0
                    continue
                if n_err == 2 and q > 1:
                    q -= 1
                h *= factor
                change_history(D, q, factor)
                st.n_equal_steps = 0

            # accepted
            if self.debug:
                assert err < 1.0 or fixed, f"accepted step with LTE norm {err}"
            st.t = t_new
            stats.n_steps += 1
            st.jacobian_age += 1
            st.n_equal_steps += 1
            if record_steps is not None:
                record_steps.append(h)
            if record_orders is not None:
                record_orders.append(q)
            D[q + 2] = d - D[q + 1]
            D[q + 1] = d
            for i in range(q, -1, -1):
                D[i] += D[i + 1]
            kernels.error_weights(D[0], rtol, atol, w)
            if fixed or st.t >= t_end:
                continue
            if st.n_equal_steps < q + 1:
                continue
            e_m = ERROR_CONST[q - 1] * kernels.wrms_norm_kernel(D[q], w) if q > 1 else None
            e_p = (ERROR_CONST[q + 1] * kernels.wrms_norm_kernel(D[q + 2], w)
                   if q < self.max_order else None)
            h_next, q_next = select_step_and_order(h, q, (e_m, err, e_p), ctl, self.max_order,
                                                   first=first_change)
            if h_next != h or q_next != q:
                first_change = False
                q = q_next
                change_history(D, q, h_next / h)
                h = h_next
                st.n_equal_steps = 0
            st.h, st.q = h, q
        st.h, st.q = h, q

    def _setup_direct(self, prob, b, t, ypred, w, c, numerical, stats, rhs):
        ycells = prob.view(ypred)
        if numerical:
            rhs(t, ypred, b.tmp)
            stats.n_rhs_evals += prob.n_comp
            fd_jacobian_cells(prob.rhs_cells, t, ycells, prob.view(w), prob.view(b.tmp), b.jac)
        else:
            self.system.jacobian(t, ycells, out=b.jac)
        stats.n_jac_evals += 1
        kernels.newton_matrix(b.jac, c, b.mat)
        bad = kernels.lu_factor(b.mat, b.piv, kernels.SINGULAR_PIVOT)
        if bad >= 0:
            raise LinearSolveFailed(f"singular Newton matrix in cell {bad}")

    def _direct_correction(self, prob, b, t_new, c, gamma_scale, rhs):
        f, res, psi, d = b.f, b.res, b.psi, b.d
        mat, piv = b.mat, b.piv
        res_cells = res.reshape(prob.n_cells, prob.n_comp)

        def correction(yv, m):
            rhs(t_new, yv, f)
            if not np.all(np.isfinite(f)):
                raise RhsFailure("non-finite rhs")
            _residual(c, f, psi, d, res)
            kernels.lu_solve(mat, piv, res_cells)
            if gamma_scale != 1.0:
                np.multiply(res, gamma_scale, out=res)
            return res

        return correction

    def _gmres_correction(self, prob, b, work, t_new, c, eps_newton, rhs, stats):
        f, res, psi, d, w, tmp, tmp2 = b.f, b.res, b.psi, b.d, b.w, b.tmp, b.tmp2
        cfg = GmresConfig(self.gmres.max_iters, self.gmres.max_restarts, self.gmres.c_l, eps_newton)
        scaling = ScalingOperators(w, w)

        def correction(yv, m):
            rhs(t_new, yv, f)
            if not np.all(np.isfinite(f)):
                raise RhsFailure("non-finite rhs")
            _residual(c, f, psi, d, res)

            def apply_A(v):
                nrm = kernels.wrms_norm_kernel(v, w)
                if nrm == 0.0:
                    return v.copy()
                sig = 1.0 / nrm
                np.multiply(v, sig, out=tmp)
                np.add(tmp, yv, out=tmp)
                rhs(t_new, tmp, tmp2)
                np.subtract(tmp2, f, out=tmp2)
                return v - (c / sig) * tmp2

            out = gmres_scaled(apply_A, res, scaling, cfg, work)
            stats.n_lin_iters += out.iters
            if not out.status.success:
                raise LinearSolveFailed(f"GMRES stopped at residual {out.residual:.3e}")
            return out.x

        return correction

    def _bootstrap(self, prob, D, q, h, t0, tol, f_ext=None):
        """Fill D with backward differences of exact-as-possible values at t0..t0+q*h."""
        from .erk import ErkIntegrator
        from ..core import ToleranceSpec as _T
        tight = _T.fixed(1e-13, 1e-13 * max(1.0, float(np.max(np.abs(D[0])))), prob.n_comp)
        erk = ErkIntegrator(self.system, n_cells=prob.n_cells, layout=prob.layout)
        pts = [prob.view(D[0]).copy()]
        for j in range(1, q + 1):
            yj, _ = erk.integrate(pts[-1], t0 + (j - 1) * h, t0 + j * h, tight, f_ext=f_ext)
            pts.append(yj)
        vals = np.array([prob.pack(p) for p in pts[::-1]])   # newest first
        diffs = vals.copy()
        D[0] = vals[0]
        for k in range(1, q + 1):
            diffs = diffs[:-1] - diffs[1:]
            D[k] = diffs[0]


def _residual(c, f, psi, d, out):
    # c*f - psi - d
    np.multiply(f, c, out=out)
    out -= psi
    out -= d
    return out


class _Buffers:
    __slots__ = ("w", "atol", "ypred", "psi", "d", "y", "f", "res", "tmp", "tmp2", "jac", "mat", "piv")

    def __init__(self, vecs):
        (self.w, self.atol, self.ypred, self.psi, self.d, self.y, self.f, self.res, self.tmp,
         self.tmp2) = vecs
        self.jac = self.mat = self.piv = None


def integrate_bdf(system, y0, t0, t_end, tol: ToleranceSpec, solver: SolverChoice = SolverChoice(), *,
                  f_ext=None, layout=Layout.CY, **options):
    """Integrate one state (n_comp,) or a lockstep batch (n_cells, n_comp) with BDF."""
    y0 = np.asarray(y0, dtype=float)
    n_cells = 1 if y0.ndim == 1 else y0.shape[0]
    run_opts = {k: options.pop(k) for k in ("fixed_step", "fixed_order", "deadline", "record_steps",
                                        "record_orders")
                if k in options}
    integ = BdfIntegrator(system, solver, n_cells=n_cells, layout=layout, **options)
    return integ.integrate(y0, t0, t_end, tol, f_ext, **run_opts)
