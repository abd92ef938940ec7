"""ODE systems in split form ``dy/dt = R(y) + f_ext`` with ``f_ext`` frozen per interval.

Right-hand sides and Jacobians are vectorised over leading axes: ``y`` may
be one state (n_comp,) or a batch (n_cells, n_comp), including the strided
view a component-major (YC) vector presents.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Optional

import numpy as np

from .errors import NonPositiveTemperature, NotProvided

ROBERTSON_K = (0.04, 3e7, 1e4)
ROBERTSON_SCALE = np.array([1.0, 1e-4, 1e4])
IGNITION_DEFAULTS = dict(A=1e8, Ta=1e4, q=2000.0)


@dataclass(frozen=True)
class OdeSystem:
    name: str
    n_comp: int
    rhs: Callable
    analytic_jacobian: Optional[Callable] = None
    component_names: tuple = ()
    temperature_index: Optional[int] = None
    y0: Optional[np.ndarray] = None
    # returns the peak-temperature threshold below which a run counts as not ignited
    ignition_threshold: Optional[Callable] = None
    params: dict = field(default_factory=dict)

    def __call__(self, t, y, f_ext=None, out=None):
        return self.rhs(t, y, f_ext, out=out)

    def jacobian(self, t, y, out=None):
        if self.analytic_jacobian is None:
            raise NotProvided(f"model {self.name!r} has no analytic Jacobian")
        return self.analytic_jacobian(t, y, out=out)

    @property
    def monitor_index(self):
        """Component used by the error metric."""
        return 0 if self.temperature_index is None else self.temperature_index


def _out(y, out):
    return np.empty(np.shape(y)) if out is None else out


def _add_forcing(out, f_ext):
    if f_ext is not None:
        out += f_ext
    return out


# ---------------------------------------------------------------- linear decay

def rhs_linear_decay(t, y, f_ext=None, lam=-1.0, out=None):
    out = _out(y, out)
    np.multiply(y, lam, out=out)
    return _add_forcing(out, f_ext)


def jac_linear_decay(t, y, lam=-1.0, out=None):
    y = np.asarray(y)
    n = y.shape[-1]
    if out is None:
        out = np.zeros(y.shape[:-1] + (n, n))
    else:
        out[...] = 0.0
    idx = np.arange(n)
    out[..., idx, idx] = lam
    return out


def linear_decay(lam=-1.0, n_comp=1):
    lam = float(lam) if np.isscalar(lam) else np.asarray(lam, dtype=float)
    return OdeSystem(
        name="linear", n_comp=n_comp,
        rhs=partial(rhs_linear_decay, lam=lam),
        analytic_jacobian=partial(jac_linear_decay, lam=lam),
        component_names=tuple(f"y{i}" for i in range(n_comp)),
        y0=np.ones(n_comp), params={"lam": lam})


# ---------------------------------------------------------------- Robertson

def rhs_robertson(t, y, f_ext=None, k=ROBERTSON_K, out=None):
    k1, k2, k3 = k
    out = _out(y, out)
    y1, y2, y3 = y[..., 0], y[..., 1], y[..., 2]
    r1 = k1 * y1
    r2 = k2 * y2 * y2
    r3 = k3 * y2 * y3
    out[..., 0] = r3 - r1
    out[..., 1] = r1 - r3 - r2
    out[..., 2] = r2
    return _add_forcing(out, f_ext)


def jac_robertson(t, y, k=ROBERTSON_K, out=None):
    k1, k2, k3 = k
    y = np.asarray(y)
    if out is None:
        out = np.empty(y.shape[:-1] + (3, 3))
    y2, y3 = y[..., 1], y[..., 2]
    out[..., 0, 0] = -k1
    out[..., 0, 1] = k3 * y3
    out[..., 0, 2] = k3 * y2
    out[..., 1, 0] = k1
    out[..., 1, 1] = -k3 * y3 - 2.0 * k2 * y2
    out[..., 1, 2] = -k3 * y2
    out[..., 2, 0] = 0.0
    out[..., 2, 1] = 2.0 * k2 * y2
    out[..., 2, 2] = 0.0
    return out


def robertson():
    return OdeSystem(
        name="robertson", n_comp=3, rhs=rhs_robertson, analytic_jacobian=jac_robertson,
        component_names=("y1", "y2", "y3"), y0=np.array([1.0, 0.0, 0.0]))


def rhs_robertson_scaled(t, y, f_ext=None, scale=ROBERTSON_SCALE, out=None):
    out = _out(y, out)
    rhs_robertson(t, y / scale, None, out=out)
    out *= scale
    return _add_forcing(out, f_ext)


def jac_robertson_scaled(t, y, scale=ROBERTSON_SCALE, out=None):
    out = jac_robertson(t, y / scale, out=out)
    out *= scale[:, None] / scale[None, :]
    return out


def robertson_scaled(scale=ROBERTSON_SCALE):
    """Robertson in the variables ``scale * y``; the third component plays temperature."""
    scale = np.asarray(scale, dtype=float)
    return OdeSystem(
        name="robertson-scaled", n_comp=3,
        rhs=partial(rhs_robertson_scaled, scale=scale),
        analytic_jacobian=partial(jac_robertson_scaled, scale=scale),
        component_names=("y1", "y2s", "y3s"), temperature_index=2,
        y0=scale * np.array([1.0, 0.0, 0.0]), params={"scale": scale})


# ---------------------------------------------------------------- toy ignition

def _check_temperature(T):
    if np.any(T <= 0.0) or not np.all(np.isfinite(T)):
        raise NonPositiveTemperature("temperature must be positive and finite")


def rhs_toy_ignition(t, y, f_ext=None, A=1e8, Ta=1e4, q=2000.0, out=None):
    """Single-step Arrhenius fuel consumption ``Y -> products`` releasing ``q`` kelvin per unit fuel."""
    out = _out(y, out)
    Y, T = y[..., 0], y[..., 1]
    _check_temperature(T)
    omega = A * Y * np.exp(-Ta / T)
    out[..., 0] = -omega
    out[..., 1] = q * omega
    return _add_forcing(out, f_ext)


def jac_toy_ignition(t, y, A=1e8, Ta=1e4, q=2000.0, out=None):
    y = np.asarray(y)
    if out is None:
        out = np.empty(y.shape[:-1] + (2, 2))
    Y, T = y[..., 0], y[..., 1]
    _check_temperature(T)
    k = A * np.exp(-Ta / T)
    dw_dT = Y * k * Ta / (T * T)
    out[..., 0, 0] = -k
    out[..., 0, 1] = -dw_dT
    out[..., 1, 0] = q * k
    out[..., 1, 1] = q * dw_dT
    return out


def toy_ignition(A=1e8, Ta=1e4, q=2000.0, Y0=1.0, T0=600.0):
    def threshold(y0):
        y0 = np.atleast_2d(y0)
        return y0[:, 1] + 0.5 * q * y0[:, 0]

    return OdeSystem(
        name="ignition", n_comp=2,
        rhs=partial(rhs_toy_ignition, A=A, Ta=Ta, q=q),
        analytic_jacobian=partial(jac_toy_ignition, A=A, Ta=Ta, q=q),
        component_names=("Y", "T"), temperature_index=1,
        y0=np.array([Y0, T0]), ignition_threshold=threshold,
        params={"A": A, "Ta": Ta, "q": q})


# ---------------------------------------------------------------- registry

MODELS = {
    "linear": linear_decay,
    "robertson": robertson,
    "robertson-scaled": robertson_scaled,
    "ignition": toy_ignition,
}


def get_model(name, **params) -> OdeSystem:
    try:
        factory = MODELS[name]
    except KeyError:
        raise KeyError(f"unknown model {name!r}; choose from {sorted(MODELS)}") from None
    return factory(**params)


def analytic_jacobian(system: OdeSystem, t, y):
    return system.jacobian(t, y)
