"""Newton iteration with rate-memory stopping test, and the Jacobian reuse policy."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, NamedTuple

from .. import kernels
from ..errors import RhsFailure, SingularBlock


@dataclass(frozen=True)
class NewtonConfig:
    c_eps: float = 0.1
    c_r: float = 0.3
    max_iters: int = 3
    divergence_threshold: float = 2.0
    # modified-Newton refresh policy
    msbj: int = 51
    dgmax: float = 0.3

    def __post_init__(self):
        if not self.c_eps > 0:
            raise ValueError("c_eps must be positive")
        if not 0.0 <= self.c_r < 1.0:
            raise ValueError("c_r must lie in [0, 1)")


class NewtonStatus(enum.Enum):
    CONVERGED = "converged"
    DIVERGED = "diverged"
    MAX_ITERS = "max_iters"
    LINEAR_FAILED = "linear_failed"
    RHS_FAILED = "rhs_failed"


class NewtonResult(NamedTuple):
    converged: bool
    iters: int
    status: NewtonStatus
    rate: float


class LinearSolveFailed(Exception):
    """Raised by a correction callback when its linear solve did not succeed."""


def newton_solve(correction: Callable, y, weights, cfg: NewtonConfig, eps, on_update=None,
                 rates=None) -> NewtonResult:
    """Iterate ``y <- y + delta_m`` until ``R*||delta_m|| < c_eps*eps``.

    ``correction(y, m)`` returns the correction for iterate ``m`` (1-based)
    and may raise LinearSolveFailed or RhsFailure. ``R`` starts at 1 and is
    updated as ``max(c_r*R, ||delta_m||/||delta_{m-1}||)``; a ratio above
    ``divergence_threshold`` aborts. ``y`` is updated in place and
    ``on_update(delta)`` is called after every applied correction. When
    given, ``rates`` collects R after each iteration.
    """
    target = cfg.c_eps * eps
    R = 1.0
    prev = 0.0
    for m in range(1, cfg.max_iters + 1):
        try:
            delta = correction(y, m)
        except LinearSolveFailed:
            return NewtonResult(False, m, NewtonStatus.LINEAR_FAILED, R)
        except SingularBlock:
            return NewtonResult(False, m, NewtonStatus.LINEAR_FAILED, R)
        except RhsFailure:
            return NewtonResult(False, m, NewtonStatus.RHS_FAILED, R)
        y += delta
        if on_update is not None:
            on_update(delta)
        dnorm = kernels.wrms_norm_kernel(delta, weights)
        if dnorm != dnorm:
            return NewtonResult(False, m, NewtonStatus.RHS_FAILED, R)
        if m > 1:
            ratio = dnorm / prev if prev > 0.0 else 0.0
            if ratio > cfg.divergence_threshold:
                return NewtonResult(False, m, NewtonStatus.DIVERGED, R)
            R = max(cfg.c_r * R, ratio)
        if rates is not None:
            rates.append(R)
        if dnorm == 0.0 or R * dnorm < target:
            return NewtonResult(True, m, NewtonStatus.CONVERGED, R)
        prev = dnorm
    return NewtonResult(False, cfg.max_iters, NewtonStatus.MAX_ITERS, R)


class JacobianRefresh(enum.Enum):
    REUSE = "reuse"
    REBUILD = "rebuild"


class NewtonEvent(enum.Enum):
    NONE = "none"
    FAILED = "failed"       # divergence, iteration cap or linear failure on the last attempt


def refresh_policy(state, event=NewtonEvent.NONE, cfg: NewtonConfig = NewtonConfig()) -> JacobianRefresh:
    """Decide whether the modified-Newton Jacobian must be rebuilt before the next solve.

    ``state`` needs ``has_jacobian``, ``jacobian_age`` (accepted steps since
    the last evaluation), ``gamma`` and ``gamma_factored``.
    """
    if not state.has_jacobian:
        return JacobianRefresh.REBUILD
    if event is NewtonEvent.FAILED:
        return JacobianRefresh.REBUILD
    if state.jacobian_age >= cfg.msbj:
        return JacobianRefresh.REBUILD
    if abs(state.gamma / state.gamma_factored - 1.0) > cfg.dgmax:
        return JacobianRefresh.REBUILD
    return JacobianRefresh.REUSE
