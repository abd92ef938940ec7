"""Step-size and order selection from WRMS local error estimates."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import kernels


@dataclass(frozen=True)
class ControllerConfig:
    # errors are multiplied by these biases before the step ratio is formed
    bias: float = 6.0
    bias_down: float = 6.0
    bias_up: float = 10.0
    growth_cap: float = 10.0
    first_growth_cap: float = 1e4
    reduction_floor: float = 0.1
    # after two or more error-test failures in a row
    repeat_reduction_cap: float = 0.2
    # an increase below this ratio is not worth re-interpolating the history
    change_threshold: float = 1.5
    conv_fail_factor: float = 0.25
    h_min_factor: float = 1e-30

    def safety(self, q):
        return self.bias ** (-1.0 / (q + 1))


def step_ratio(err, exponent_order, bias):
    """``(1 / (bias*err)) ** (1/(p+1))``; infinite when the error vanishes."""
    if err is None or not np.isfinite(err):
        return 0.0
    if err <= 0.0:
        return math.inf
    return (1.0 / (bias * err)) ** (1.0 / (exponent_order + 1))


def select_step_and_order(h, q, lte_norms, cfg=ControllerConfig(), max_order=5, first=False):
    """Next (h, q) after an accepted step.

    ``lte_norms`` holds WRMS local error estimates for orders (q-1, q, q+1);
    use ``None`` for an order that is unavailable. The order whose estimate
    permits the largest step wins (every order costs one Newton solve per
    step). Growth below ``change_threshold`` is ignored when the order stays.
    """
    e_m, e_q, e_p = lte_norms
    eta_q = step_ratio(e_q, q, cfg.bias)
    eta_m = step_ratio(e_m, q - 1, cfg.bias_down) if q > 1 else 0.0
    eta_p = step_ratio(e_p, q + 1, cfg.bias_up) if q < max_order else 0.0
    eta, q_next = eta_q, q
    if eta_m > eta:
        eta, q_next = eta_m, q - 1
    if eta_p > eta:
        eta, q_next = eta_p, q + 1
    if q_next == q and eta < cfg.change_threshold:
        return h, q
    cap = cfg.first_growth_cap if first else cfg.growth_cap
    eta = min(eta, cap)
    return h * eta, q_next


def rejection_factor(err, q, n_fails, cfg=ControllerConfig()):
    eta = step_ratio(err, q, cfg.bias)
    eta = max(cfg.reduction_floor, min(eta, 1.0))
    if n_fails >= 2:
        eta = min(eta, cfg.repeat_reduction_cap)
    return eta


def initial_step(rhs, t0, y0, f0, w, t_span, order=1, work=None):
    """Initial step from a weighted second-derivative estimate.

    Uses one extra rhs evaluation at ``y0 + h_probe*f0``; returns (h0, n_evals).
    Falls back to ``1e-6 * t_span`` when the estimate is unusable.
    """
    fallback = 1e-6 * t_span
    d0 = kernels.wrms_norm_kernel(y0, w)
    d1 = kernels.wrms_norm_kernel(f0, w)
    if d1 == 0.0:
        return t_span, 0
    if d0 < 1e-5:
        h_probe = 1e-6 * t_span
    else:
        h_probe = min(0.01 * d0 / d1, t_span)
    h_probe = max(h_probe, 1e-12 * t_span)
    y1 = y0 + h_probe * f0 if work is None else np.add(y0, h_probe * f0, out=work[0])
    f1 = np.empty_like(y0) if work is None else work[1]
    try:
        rhs(t0 + h_probe, y1, f1)
    except Exception:
        return fallback, 1
    f1 -= f0
    d2 = kernels.wrms_norm_kernel(f1, w) / h_probe
    if not np.isfinite(d2):
        return fallback, 1
    if d2 <= 1e-15 * max(d1, 1.0):
        h = 100.0 * h_probe
    else:
        # backward Euler local error is about h^2/2 * y''; aim for a weighted value near 1/8
        h = (0.25 / d2) ** (1.0 / (order + 1))
        h = min(h, 100.0 * h_probe)
    if not np.isfinite(h) or h <= 0.0:
        return fallback, 1
    return min(h, t_span), 1
