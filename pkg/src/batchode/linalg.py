"""Linear algebra for the Newton iterations.

Batched dense LU over block-diagonal Jacobians, difference-quotient
Jacobians and Jacobian-vector products, and a diagonally scaled GMRES that
tracks its residual norm through Givens rotations.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np

from . import kernels
from .errors import LayoutMismatch, SingularBlock
from .layout import CellBlock, Layout

UROUND = np.finfo(float).eps
SQRT_UROUND = math.sqrt(UROUND)


@dataclass
class BlockDiagMatrix:
    """``n_cells`` dense ``n_comp x n_comp`` blocks; block k acts on cell k only."""

    blocks: np.ndarray
    pivots: Optional[np.ndarray] = None

    def __post_init__(self):
        self.blocks = np.asarray(self.blocks, dtype=float)
        if self.blocks.ndim == 2:
            self.blocks = self.blocks[None]
        if self.blocks.ndim != 3 or self.blocks.shape[1] != self.blocks.shape[2]:
            raise ValueError(f"blocks must have shape (n_cells, n, n), got {self.blocks.shape}")

    @property
    def n_cells(self):
        return self.blocks.shape[0]

    @property
    def n_comp(self):
        return self.blocks.shape[1]

    @property
    def factored(self):
        return self.pivots is not None

    def matvec(self, cells):
        """Apply the (unfactored) blocks to a (n_cells, n_comp) array."""
        return np.einsum("bij,bj->bi", self.blocks, cells)

    def unpack_lu(self):
        """Return (P, L, U) stacks with ``P @ A = L @ U`` per block."""
        if not self.factored:
            raise ValueError("matrix is not factored")
        n = self.n_comp
        L = np.tril(self.blocks, -1) + np.eye(n)
        U = np.triu(self.blocks)
        P = np.empty_like(self.blocks)
        for b in range(self.n_cells):
            perm = np.arange(n)
            for k, p in enumerate(self.pivots[b]):
                perm[[k, p]] = perm[[p, k]]
            P[b] = np.eye(n)[perm]
        return P, L, U


# ---------------------------------------------------------------- difference quotients

def fd_jacobian_cells(rhs, t, y, w, fy, out, increments=None):
    """Forward-difference Jacobian blocks for every cell at once.

    ``y``, ``w``, ``fy`` are (n_cells, n_comp); column j of every block costs
    one batched rhs evaluation. Returns ``out`` (n_cells, n_comp, n_comp).
    """
    n_comp = y.shape[1]
    if increments is None:
        sig = np.maximum(SQRT_UROUND * np.abs(y), 1.0 / (n_comp * w))
    else:
        sig = np.broadcast_to(increments, y.shape)
    ypert = np.array(y, dtype=float, order="C")
    fpert = np.empty_like(ypert)
    for j in range(n_comp):
        save = ypert[:, j].copy()
        ypert[:, j] = save + sig[:, j]
        # the increment actually applied after rounding
        step = ypert[:, j] - save
        rhs(t, ypert, fpert)
        out[:, :, j] = (fpert - fy) / step[:, None]
        ypert[:, j] = save
    return out


def fd_jacobian(system, t, y, weights, f_ext=None, increments=None):
    """Difference-quotient Jacobian: a dense block for one state, a BlockDiagMatrix for a batch."""
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    y2 = np.atleast_2d(y)
    w2 = np.broadcast_to(np.asarray(weights, dtype=float).reshape(y2.shape) if np.size(weights) == y2.size
                         else weights, y2.shape)
    fe = None if f_ext is None else np.broadcast_to(f_ext, y2.shape)

    def rhs(tt, yy, out):
        system.rhs(tt, yy, fe, out=out)

    fy = np.empty_like(y2)
    rhs(t, y2, fy)
    out = np.empty((y2.shape[0], y2.shape[1], y2.shape[1]))
    fd_jacobian_cells(rhs, t, y2, w2, fy, out, increments)
    return out[0] if single else BlockDiagMatrix(out)


def jv_increment(v, w):
    """Directional increment ``1/||v||_wrms`` (0 when v vanishes)."""
    nrm = kernels.wrms_norm_kernel(v, w)
    return 0.0 if nrm == 0.0 else 1.0 / nrm


def jv_product(system, t, y, v, weights, f_ext=None, fy=None):
    """``(f(y + s v) - f(y)) / s`` with ``s = 1/||v||_wrms``."""
    y = np.asarray(y, dtype=float)
    v = np.asarray(v, dtype=float)
    if v.shape != y.shape:
        raise ValueError("v and y must have the same shape")
    w = np.broadcast_to(weights, y.shape)
    sig = jv_increment(v.reshape(-1), np.ascontiguousarray(w).reshape(-1))
    if sig == 0.0:
        return np.zeros_like(y)
    if fy is None:
        fy = system.rhs(t, y, f_ext)
    return (system.rhs(t, y + sig * v, f_ext) - fy) / sig


# ---------------------------------------------------------------- batched LU

def lu_factor_batched(m: BlockDiagMatrix, overwrite=False) -> BlockDiagMatrix:
    blocks = m.blocks if overwrite else m.blocks.copy()
    piv = np.empty(blocks.shape[:2], dtype=np.int64)
    bad = kernels.lu_factor(blocks, piv, kernels.SINGULAR_PIVOT)
    if bad >= 0:
        raise SingularBlock(int(bad))
    if overwrite:
        m.pivots = piv
        return m
    return BlockDiagMatrix(blocks, piv)


def lu_solve_batched(factored: BlockDiagMatrix, b: CellBlock) -> CellBlock:
    if not factored.factored:
        raise ValueError("matrix must be factored first")
    if b.layout is not Layout.CY:
        raise LayoutMismatch("batched direct solves need cell-major (CY) data")
    if (b.n_cells, b.n_comp) != factored.blocks.shape[:2]:
        raise ValueError("right-hand side does not match the block structure")
    x = b.copy()
    kernels.lu_solve(factored.blocks, factored.pivots, x.cells())
    return x


# ---------------------------------------------------------------- scaled GMRES

def _identity(x):
    return x


@dataclass
class ScalingOperators:
    """Diagonal scalings (entries are the error weights) and optional preconditioner solves.

    ``p1``/``p2`` apply the inverse of the left/right preconditioner.
    """

    s1: np.ndarray
    s2: np.ndarray
    p1: Callable = _identity
    p2: Callable = _identity

    def __post_init__(self):
        if np.any(self.s1 <= 0) or np.any(self.s2 <= 0):
            raise ValueError("scaling vectors must be strictly positive")

    @classmethod
    def identity(cls, n):
        one = np.ones(n)
        return cls(one, one)


@dataclass
class GmresConfig:
    max_iters: int = 30
    max_restarts: int = 0
    c_l: float = 0.05
    # nonlinear stopping scale c_eps*eps, expressed for the 2-norm of the scaled residual
    eps_newton: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.c_l <= 1.0):
            raise ValueError("c_l must lie in (0, 1]")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")

    @property
    def tolerance(self):
        return self.c_l * self.eps_newton


class GmresStatus(enum.Enum):
    CONVERGED = "converged"
    HAPPY_BREAKDOWN = "happy_breakdown"
    MAX_ITERS = "max_iters"

    @property
    def success(self):
        return self is not GmresStatus.MAX_ITERS


class GmresResult(NamedTuple):
    x: np.ndarray
    iters: int
    residual: float
    status: GmresStatus
    history: list
    iterates: list


class GmresWorkspace:
    """Krylov basis and Hessenberg storage sized for one configuration; reusable."""

    def __init__(self, n, max_iters, pool=None):
        self.n = n
        self.max_iters = max_iters
        m = max_iters
        self._pool = pool
        if pool is None:
            self.basis = np.zeros((m + 1, n))
            self.hess = np.zeros((m + 1, m))
            self.vec = np.zeros((4, n))
        else:
            self.basis = pool.acquire((m + 1, n))
            self.hess = pool.acquire((m + 1, m))
            self.vec = pool.acquire((4, n))
        self.givens = np.zeros((2, m))
        self.g = np.zeros(m + 1)

    def fits(self, n, max_iters):
        return self.n == n and self.max_iters >= max_iters

    def free(self):
        if self._pool is not None:
            self._pool.release_all([self.basis, self.hess, self.vec])
            self._pool = None


def _back_substitute(R, g, k):
    y = np.empty(k)
    for i in range(k - 1, -1, -1):
        s = g[i]
        for j in range(i + 1, k):
            s -= R[i, j] * y[j]
        y[i] = s / R[i, i]
    return y


def gmres_scaled(apply_A, b, scaling: ScalingOperators, cfg: GmresConfig, work=None,
                 trace=False) -> GmresResult:
    """GMRES on ``S1 P1^-1 A P2^-1 S2^-1 xt = S1 P1^-1 b`` with ``x = P2^-1 S2^-1 xt``.

    Arnoldi uses modified Gram-Schmidt; the residual 2-norm of the scaled
    system is read off the Givens-rotated right-hand side, never formed
    explicitly. Stops once that norm drops below ``cfg.tolerance``. The
    initial guess is zero. With ``trace`` the scaled iterate and tracked
    residual of every iteration are returned for inspection.
    """
    n = b.size
    m = cfg.max_iters
    if work is None or not work.fits(n, m):
        work = GmresWorkspace(n, m)
    V, H, g = work.basis, work.hess, work.g
    cs, sn = work.givens
    tmp = work.vec[0]
    w = work.vec[1]
    xt = work.vec[2]
    s1, s2, p1, p2 = scaling.s1, scaling.s2, scaling.p1, scaling.p2
    tol = cfg.tolerance

    xt[:] = 0.0
    np.multiply(s1, p1(b), out=tmp)
    r0 = math.sqrt(float(np.dot(tmp, tmp)))
    history = [r0]
    iterates = [xt.copy()] if trace else []
    total = 0
    status = GmresStatus.MAX_ITERS
    res = r0
    if r0 < tol:
        status = GmresStatus.CONVERGED
    restarts = 0
    while status is GmresStatus.MAX_ITERS:
        beta = res
        np.multiply(tmp, 1.0 / beta, out=V[0])
        g[:] = 0.0
        g[0] = beta
        k_done = 0
        for k in range(m):
            # w = S1 P1^-1 A P2^-1 S2^-1 v_k
            np.divide(V[k], s2, out=w)
            w[:] = s1 * p1(apply_A(p2(w)))
            wnorm0 = math.sqrt(float(np.dot(w, w)))
            hk1 = kernels.mgs_step(V, k, w, H[:, k])
            H[k + 1, k] = hk1
            for i in range(k):
                hi, hi1 = H[i, k], H[i + 1, k]
                H[i, k] = cs[i] * hi + sn[i] * hi1
                H[i + 1, k] = -sn[i] * hi + cs[i] * hi1
            a, c = H[k, k], H[k + 1, k]
            rho = math.hypot(a, c)
            if rho == 0.0:
                cs[k], sn[k] = 1.0, 0.0
            else:
                cs[k], sn[k] = a / rho, c / rho
            H[k, k] = rho
            H[k + 1, k] = 0.0
            g[k + 1] = -sn[k] * g[k]
            g[k] = cs[k] * g[k]
            res = abs(g[k + 1])
            total += 1
            k_done = k + 1
            history.append(res)
            happy = hk1 <= 1e-14 * wnorm0
            if trace:
                yk = _back_substitute(H, g, k_done)
                iterates.append(xt + V[:k_done].T @ yk)
            if happy:
                status = GmresStatus.HAPPY_BREAKDOWN
                break
            if res < tol:
                status = GmresStatus.CONVERGED
                break
            if k + 1 < m:
                np.multiply(w, 1.0 / hk1, out=V[k + 1])
        y = _back_substitute(H, g, k_done)
        xt += V[:k_done].T @ y
        if status is not GmresStatus.MAX_ITERS or restarts >= cfg.max_restarts:
            break
        restarts += 1
        # restart from the explicit scaled residual
        np.divide(xt, s2, out=w)
        w[:] = s1 * p1(apply_A(p2(w)))
        np.multiply(s1, p1(b), out=tmp)
        tmp -= w
        res = math.sqrt(float(np.dot(tmp, tmp)))
        if res < tol:
            status = GmresStatus.CONVERGED
    x = p2(xt / s2)
    return GmresResult(np.array(x, copy=True), total, res, status, history, iterates)
