"""Hot inner loops.

Every kernel exists twice: an explicit-loop version compiled with numba
(``*_nb``) and a vectorised numpy version (``*_np``). The public name binds
to one of them at import time according to ``_accel.USE_NUMBA``; both stay
importable so tests and the benchmark can compare them directly.
"""
import math

import numpy as np

from ._accel import njit, select

# |pivot| at or below this is treated as an exact zero
SINGULAR_PIVOT = 1e-300


# ---------------------------------------------------------------- weights

@njit
def error_weights_nb(y, rtol, atol, out):
    for i in range(y.size):
        out[i] = 1.0 / (rtol * abs(y[i]) + atol[i])
    return out


def error_weights_np(y, rtol, atol, out):
    np.abs(y, out=out)
    out *= rtol
    out += atol
    np.reciprocal(out, out=out)
    return out


@njit
def wrms_norm_nb(v, w):
    s = 0.0
    for i in range(v.size):
        t = v[i] * w[i]
        s += t * t
    return math.sqrt(s / v.size)


def wrms_norm_np(v, w):
    t = v * w
    return math.sqrt(float(np.dot(t, t)) / v.size)


# ---------------------------------------------------------------- fused vector ops

@njit
def linear_combination_nb(coeffs, vectors, out):
    nterm = coeffs.size
    for j in range(out.size):
        s = coeffs[0] * vectors[0, j]
        for k in range(1, nterm):
            s += coeffs[k] * vectors[k, j]
        out[j] = s
    return out


def linear_combination_np(coeffs, vectors, out):
    np.multiply(vectors[0], coeffs[0], out=out)
    for k in range(1, coeffs.size):
        out += coeffs[k] * vectors[k]
    return out


@njit
def scale_add_nb(a, x, b, y, out):
    for i in range(out.size):
        out[i] = a * x[i] + b * y[i]
    return out


def scale_add_np(a, x, b, y, out):
    np.multiply(x, a, out=out)
    out += b * y
    return out


# ---------------------------------------------------------------- batched dense LU

@njit
def lu_factor_nb(a, piv, tiny):
    """In-place partial-pivot LU of every block of ``a`` (nb, n, n).

    Returns the first block index with a zero pivot, or -1.
    """
    nb, n, _ = a.shape
    bad = -1
    for b in range(nb):
        for k in range(n):
            p = k
            amax = abs(a[b, k, k])
            for i in range(k + 1, n):
                v = abs(a[b, i, k])
                if v > amax:
                    amax = v
                    p = i
            piv[b, k] = p
            if amax <= tiny:
                if bad < 0:
                    bad = b
                break
            if p != k:
                for j in range(n):
                    tmp = a[b, k, j]
                    a[b, k, j] = a[b, p, j]
                    a[b, p, j] = tmp
            inv = 1.0 / a[b, k, k]
            for i in range(k + 1, n):
                lik = a[b, i, k] * inv
                a[b, i, k] = lik
                if lik != 0.0:
                    for j in range(k + 1, n):
                        a[b, i, j] -= lik * a[b, k, j]
    return bad


def lu_factor_np(a, piv, tiny):
    nb, n, _ = a.shape
    rows = np.arange(nb)
    bad_mask = np.zeros(nb, dtype=bool)
    for k in range(n):
        p = k + np.argmax(np.abs(a[:, k:, k]), axis=1)
        piv[:, k] = p
        pivval = np.abs(a[rows, p, k])
        bad_mask |= pivval <= tiny
        swap = p != k
        if swap.any():
            idx = rows[swap]
            rk = a[idx, k, :].copy()
            a[idx, k, :] = a[idx, p[swap], :]
            a[idx, p[swap], :] = rk
        d = a[:, k, k]
        safe = np.where(bad_mask, 1.0, d)
        if k + 1 < n:
            l = a[:, k + 1:, k] / safe[:, None]
            l[bad_mask] = 0.0
            a[:, k + 1:, k] = l
            a[:, k + 1:, k + 1:] -= l[:, :, None] * a[:, k, None, k + 1:]
    if bad_mask.any():
        return int(np.argmax(bad_mask))
    return -1


@njit
def lu_solve_nb(lu, piv, b):
    """Solve in place for every block; ``b`` has shape (nb, n)."""
    nb, n, _ = lu.shape
    for c in range(nb):
        for k in range(n):
            p = piv[c, k]
            if p != k:
                tmp = b[c, k]
                b[c, k] = b[c, p]
                b[c, p] = tmp
        for i in range(1, n):
            s = b[c, i]
            for j in range(i):
                s -= lu[c, i, j] * b[c, j]
            b[c, i] = s
        for i in range(n - 1, -1, -1):
            s = b[c, i]
            for j in range(i + 1, n):
                s -= lu[c, i, j] * b[c, j]
            b[c, i] = s / lu[c, i, i]
    return b


def lu_solve_np(lu, piv, b):
    nb, n, _ = lu.shape
    rows = np.arange(nb)
    for k in range(n):
        p = piv[:, k]
        swap = p != k
        if swap.any():
            idx = rows[swap]
            tmp = b[idx, k].copy()
            b[idx, k] = b[idx, p[swap]]
            b[idx, p[swap]] = tmp
    for i in range(1, n):
        b[:, i] -= np.einsum("bj,bj->b", lu[:, i, :i], b[:, :i])
    for i in range(n - 1, -1, -1):
        if i + 1 < n:
            b[:, i] -= np.einsum("bj,bj->b", lu[:, i, i + 1:], b[:, i + 1:])
        b[:, i] /= lu[:, i, i]
    return b


@njit
def newton_matrix_nb(jac, gamma, out):
    nb, n, _ = jac.shape
    for b in range(nb):
        for i in range(n):
            for j in range(n):
                out[b, i, j] = -gamma * jac[b, i, j]
            out[b, i, i] += 1.0
    return out


def newton_matrix_np(jac, gamma, out):
    np.multiply(jac, -gamma, out=out)
    n = jac.shape[1]
    idx = np.arange(n)
    out[:, idx, idx] += 1.0
    return out


# ---------------------------------------------------------------- Arnoldi

@njit
def mgs_step_nb(basis, k, w, hcol):
    """Orthogonalise ``w`` against rows 0..k of ``basis`` (modified Gram-Schmidt).

    Coefficients go to ``hcol[0..k]``; returns the 2-norm of what is left.
    """
    n = w.size
    for i in range(k + 1):
        s = 0.0
        for j in range(n):
            s += basis[i, j] * w[j]
        hcol[i] = s
        for j in range(n):
            w[j] -= s * basis[i, j]
    s = 0.0
    for j in range(n):
        s += w[j] * w[j]
    return math.sqrt(s)


def mgs_step_np(basis, k, w, hcol):
    for i in range(k + 1):
        s = float(np.dot(basis[i], w))
        hcol[i] = s
        w -= s * basis[i]
    return float(np.sqrt(np.dot(w, w)))


error_weights = select(error_weights_nb, error_weights_np)
wrms_norm_kernel = select(wrms_norm_nb, wrms_norm_np)
linear_combination = select(linear_combination_nb, linear_combination_np)
scale_add = select(scale_add_nb, scale_add_np)
lu_factor = select(lu_factor_nb, lu_factor_np)
lu_solve = select(lu_solve_nb, lu_solve_np)
newton_matrix = select(newton_matrix_nb, newton_matrix_np)
mgs_step = select(mgs_step_nb, mgs_step_np)
