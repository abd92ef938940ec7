"""Tolerances, WRMS weighting, typical values, fused vector ops and the vector pool."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from . import kernels
from .errors import DoubleRelease, EmptyBatch, EmptyTermList, LengthMismatch, NonFiniteInput

ATOL_FLOOR = 1e-30
DEFAULT_ETA = 1e-10


# ---------------------------------------------------------------- tolerances

@dataclass(frozen=True)
class FixedScalar:
    value: float


@dataclass(frozen=True)
class TypicalValuesStrategy:
    eta: float = DEFAULT_ETA
    update_interval_steps: int = 1
    atol_floor: float = ATOL_FLOOR


Strategy = Union[FixedScalar, TypicalValuesStrategy]


@dataclass(frozen=True)
class ToleranceSpec:
    """Relative tolerance plus one absolute tolerance per state component."""

    rtol: float
    atol: np.ndarray
    strategy: Strategy

    def __post_init__(self):
        atol = np.array(self.atol, dtype=float, ndmin=1)
        atol.setflags(write=False)
        object.__setattr__(self, "atol", atol)
        if not self.rtol >= 0.0:
            raise ValueError(f"rtol must be nonnegative, got {self.rtol}")
        floor = self.strategy.atol_floor if isinstance(self.strategy, TypicalValuesStrategy) else 0.0
        if not np.all(np.isfinite(atol)) or np.any(atol <= 0.0) or np.any(atol < floor):
            raise ValueError("every atol component must be finite, positive and above the floor")
        if isinstance(self.strategy, FixedScalar) and np.any(atol != atol[0]):
            raise ValueError("FixedScalar strategy requires equal atol components")

    @property
    def n_comp(self):
        return self.atol.size

    @classmethod
    def fixed(cls, rtol, value, n_comp=1):
        return cls(rtol, np.full(n_comp, float(value)), FixedScalar(float(value)))

    @classmethod
    def typical(cls, rtol, tv, eta=DEFAULT_ETA, atol_floor=ATOL_FLOOR, update_interval_steps=1):
        tv = tv.tv if isinstance(tv, TypicalValues) else np.asarray(tv, dtype=float)
        return cls(rtol, atol_from_typical(tv, eta, atol_floor),
                   TypicalValuesStrategy(eta, update_interval_steps, atol_floor))

    def with_typical(self, tv):
        """Same strategy, atol recomputed from new typical values."""
        s = self.strategy
        if not isinstance(s, TypicalValuesStrategy):
            return self
        return dataclasses.replace(self, atol=atol_from_typical(tv, s.eta, s.atol_floor))


def compute_weights(y_prev, tol: ToleranceSpec, out=None):
    """Error weights ``1 / (rtol*|y_prev| + atol)``.

    ``y_prev`` may be a single state (n_comp,) or a cell-major batch
    (n_cells, n_comp); ``atol`` broadcasts over cells.
    """
    y = np.asarray(y_prev, dtype=float)
    if not np.all(np.isfinite(y)):
        raise NonFiniteInput("y_prev contains NaN or Inf")
    if y.shape[-1] != tol.n_comp:
        raise LengthMismatch(f"state has {y.shape[-1]} components, tolerance has {tol.n_comp}")
    atol = np.broadcast_to(tol.atol, y.shape)
    if out is None:
        out = np.empty(y.shape)
    kernels.error_weights(y.reshape(-1), float(tol.rtol), np.ascontiguousarray(atol).reshape(-1),
                          out.reshape(-1))
    return out


def wrms_norm(v, w):
    v = np.asarray(v, dtype=float).reshape(-1)
    w = np.asarray(w, dtype=float).reshape(-1)
    if v.size != w.size:
        raise LengthMismatch(f"vector length {v.size} != weight length {w.size}")
    if v.size == 0:
        raise LengthMismatch("empty vector")
    return kernels.wrms_norm_kernel(v, w)


# ---------------------------------------------------------------- typical values

@dataclass(frozen=True)
class TypicalValues:
    tv: np.ndarray
    last_update_step: int = 0

    @classmethod
    def unmanaged(cls, n_comp):
        return cls(np.ones(n_comp))


def update_typical_values(cells, prev: TypicalValues | None = None, step=None):
    """Per-component midpoint of the min and max over every cell.

    ``cells`` is a CellBlock or an array of shape (n_cells, n_comp).
    """
    arr = cells.cells() if hasattr(cells, "cells") else np.asarray(cells, dtype=float)
    arr = np.atleast_2d(arr)
    if arr.shape[0] == 0:
        raise EmptyBatch("cannot take typical values of an empty batch")
    tv = 0.5 * (arr.min(axis=0) + arr.max(axis=0))
    if step is None:
        step = prev.last_update_step + 1 if prev is not None else 0
    return TypicalValues(tv, step)


def atol_from_typical(tv, eta, floor=ATOL_FLOOR):
    if eta <= 0 or floor <= 0:
        raise ValueError("eta and floor must be positive")
    tv = tv.tv if isinstance(tv, TypicalValues) else np.asarray(tv, dtype=float)
    return np.maximum(eta * np.abs(tv), floor)


# ---------------------------------------------------------------- fused ops

def fused_linear_combination(coeffs, vectors, out=None):
    """``out = sum_k coeffs[k] * vectors[k]`` in one pass over the data.

    Passing ``vectors`` as a stacked 2-D array avoids a gather copy.
    """
    c = np.asarray(coeffs, dtype=float).reshape(-1)
    if c.size == 0:
        raise EmptyTermList("need at least one term")
    if isinstance(vectors, np.ndarray) and vectors.ndim == 2:
        mat = vectors
    else:
        if len(vectors) == 0:
            raise EmptyTermList("need at least one term")
        lens = {np.shape(v)[0] for v in vectors}
        if len(lens) != 1:
            raise LengthMismatch(f"vectors have differing lengths {sorted(lens)}")
        mat = np.asarray(vectors, dtype=float)
    if mat.shape[0] != c.size:
        raise LengthMismatch(f"{c.size} coefficients for {mat.shape[0]} vectors")
    if out is None:
        out = np.empty(mat.shape[1])
    elif out.shape[0] != mat.shape[1]:
        raise LengthMismatch("output length differs from input length")
    return kernels.linear_combination(c, mat, out)


def fused_scale_add(a, x, b, y, out=None):
    if x.shape != y.shape:
        raise LengthMismatch("x and y differ in length")
    if out is None:
        out = np.empty_like(x)
    return kernels.scale_add(float(a), x, float(b), y, out)


# ---------------------------------------------------------------- pool

@dataclass
class PoolStats:
    acquires: int = 0
    releases: int = 0
    fresh_allocations: int = 0

    @property
    def held(self):
        return self.acquires - self.releases


class VectorPool:
    """Free-list of flat numeric buffers handed out as shaped views.

    ``acquire`` reuses the smallest free buffer that is large enough and
    only allocates when none fits, so after a warm-up pass the number of
    fresh allocations stays flat. New buffers are zero-filled; reused ones
    keep whatever the previous owner left. One pool per integrator
    instance, never shared between threads.
    """

    def __init__(self, capacity=None):
        self.capacity = capacity
        self.stats = PoolStats()
        self._free = []          # list of flat base arrays
        self._held = {}          # id(base) -> base

    @property
    def buffer_len(self):
        lens = [b.size for b in self._free] + [b.size for b in self._held.values()]
        return max(lens, default=0)

    def acquire(self, shape, dtype=np.float64):
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        dtype = np.dtype(dtype)
        best = None
        for i, buf in enumerate(self._free):
            if buf.dtype == dtype and buf.size >= n and (best is None or buf.size < self._free[best].size):
                best = i
        if best is None:
            if self.capacity is not None and len(self._held) >= self.capacity:
                raise MemoryError(f"pool capacity {self.capacity} exhausted")
            base = np.zeros(max(n, 1), dtype=dtype)
            self.stats.fresh_allocations += 1
        else:
            base = self._free.pop(best)
        self._held[id(base)] = base
        self.stats.acquires += 1
        return base[:n].reshape(shape)

    def clone(self, like):
        """A new buffer with the shape and dtype of ``like`` (contents undefined)."""
        return self.acquire(np.shape(like), np.asarray(like).dtype)

    def release(self, view):
        base = view if view.base is None else view.base
        buf = self._held.pop(id(base), None)
        if buf is None:
            raise DoubleRelease("buffer is not currently held by this pool")
        self._free.append(buf)
        self.stats.releases += 1

    def release_all(self, views):
        for v in views:
            self.release(v)


# ---------------------------------------------------------------- stats

@dataclass
class IntegratorStats:
    n_steps: int = 0
    n_rhs_evals: int = 0
    n_newton_iters: int = 0
    n_lin_iters: int = 0
    n_jac_evals: int = 0
    n_err_test_fails: int = 0
    n_conv_fails: int = 0
    n_attempts: int = 0

    def __add__(self, other):
        return IntegratorStats(*(a + b for a, b in zip(dataclasses.astuple(self), dataclasses.astuple(other))))

    def as_dict(self):
        return dataclasses.asdict(self)


def stats_sum(items: Sequence[IntegratorStats]):
    total = IntegratorStats()
    for s in items:
        total = total + s
    return total
