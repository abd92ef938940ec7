import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from batchode.core import ToleranceSpec
from batchode.errors import NonPositiveTemperature, NotProvided
from batchode.integrators import integrate_bdf
from batchode.models import (MODELS, OdeSystem, analytic_jacobian, get_model, linear_decay, rhs_linear_decay,
                             rhs_robertson, rhs_toy_ignition, robertson, robertson_scaled, toy_ignition)

seeds = st.integers(0, 2 ** 32 - 1)


def central_difference_jacobian(rhs, y, rel=1e-6):
    """Test oracle: second-order central differences, column by column."""
    n = y.size
    jac = np.empty((n, n))
    for j in range(n):
        h = rel * max(abs(y[j]), 1e-3)
        yp, ym = y.copy(), y.copy()
        yp[j] += h
        ym[j] -= h
        jac[:, j] = (rhs(0.0, yp) - rhs(0.0, ym)) / (yp[j] - ym[j])
    return jac


def random_state(name, rng):
    if name == "linear":
        return rng.standard_normal(1)
    if name == "robertson":
        return np.array([rng.uniform(0, 1), rng.uniform(0, 4e-5), rng.uniform(0, 1)])
    if name == "robertson-scaled":
        return np.array([rng.uniform(0, 1), rng.uniform(0, 4e-9), rng.uniform(0, 1e4)])
    return np.array([rng.uniform(0, 1), rng.uniform(500, 2700)])


# ---------------------------------------------------------------- rhs examples

def test_linear_decay_examples():
    assert rhs_linear_decay(0.0, np.array([1.0]), None, lam=-1.0)[0] == -1.0
    assert rhs_linear_decay(0.0, np.array([0.0]), None)[0] == 0.0
    assert rhs_linear_decay(0.0, np.array([3.0]), np.array([1.0]), lam=-2.0)[0] == -5.0


def test_robertson_examples():
    np.testing.assert_allclose(rhs_robertson(0.0, np.array([1.0, 0.0, 0.0])), [-0.04, 0.04, 0.0])
    np.testing.assert_array_equal(rhs_robertson(0.0, np.zeros(3)), 0.0)


@given(seeds)
def test_robertson_rhs_sum_equals_forcing_sum(seed):
    rng = np.random.default_rng(seed)
    y = random_state("robertson", rng)
    f_ext = rng.standard_normal(3)
    f = rhs_robertson(0.0, y, f_ext)
    assert f.sum() == pytest.approx(f_ext.sum(), abs=1e-12 * (1 + np.abs(f).max()))


def test_ignition_examples():
    f_ext = np.array([0.25, -3.0])
    np.testing.assert_array_equal(rhs_toy_ignition(0.0, np.array([0.0, 900.0]), f_ext), f_ext)
    f = rhs_toy_ignition(0.0, np.array([1.0, 600.0]))
    omega = 1e8 * math.exp(-1e4 / 600.0)
    assert f[0] == pytest.approx(-omega, rel=1e-15)
    assert f[1] == pytest.approx(2000.0 * omega, rel=1e-15)


@given(seeds)
def test_ignition_coupling_identity(seed):
    rng = np.random.default_rng(seed)
    y = random_state("ignition", rng)
    f_ext = rng.standard_normal(2)
    f = rhs_toy_ignition(0.0, y, f_ext, q=2000.0)
    assert 2000.0 * (f[0] - f_ext[0]) + (f[1] - f_ext[1]) == pytest.approx(0.0, abs=1e-9 * abs(f[1]) + 1e-12)


def test_ignition_rejects_nonpositive_temperature():
    with pytest.raises(NonPositiveTemperature):
        rhs_toy_ignition(0.0, np.array([1.0, 0.0]))
    with pytest.raises(NonPositiveTemperature):
        toy_ignition().jacobian(0.0, np.array([[1.0, 600.0], [1.0, -5.0]]))


def test_rhs_vectorised_over_cells_matches_per_cell():
    rng = np.random.default_rng(4)
    for name in MODELS:
        system = get_model(name)
        cells = np.array([random_state(name, rng) for _ in range(5)])
        batched = system(0.0, cells)
        for c in range(5):
            np.testing.assert_array_equal(batched[c], system(0.0, cells[c]))


@pytest.mark.parametrize("name", sorted(MODELS))
def test_rhs_is_pure(name):
    system = get_model(name)
    y = random_state(name, np.random.default_rng(1))
    a = system(0.0, y.copy())
    b = system(0.0, y.copy())
    assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------- Jacobians

def test_analytic_jacobian_examples():
    np.testing.assert_array_equal(analytic_jacobian(linear_decay(-3.0, 2), 0.0, np.ones(2)), -3.0 * np.eye(2))
    j = analytic_jacobian(robertson(), 0.0, np.array([1.0, 0.0, 0.0]))
    np.testing.assert_allclose(j[:, 0], [-0.04, 0.04, 0.0])
    y = np.array([0.7, 1100.0])
    j = analytic_jacobian(toy_ignition(), 0.0, y)
    assert j[1, 0] == pytest.approx(2000.0 * 1e8 * math.exp(-1e4 / 1100.0), rel=1e-15)


def test_missing_jacobian_raises():
    bare = OdeSystem("bare", 1, rhs_linear_decay)
    with pytest.raises(NotProvided):
        analytic_jacobian(bare, 0.0, np.ones(1))


@pytest.mark.parametrize("name", sorted(MODELS))
def test_analytic_jacobian_matches_central_differences(name):
    system = get_model(name)
    rng = np.random.default_rng(11)
    for _ in range(100):
        y = random_state(name, rng)
        ref = central_difference_jacobian(lambda t, yy: system(t, yy), y)
        jac = system.jacobian(0.0, y)
        scale = np.abs(ref) + np.max(np.abs(ref)) * 1e-6 + 1e-300
        assert np.max(np.abs(jac - ref) / scale) <= 1e-5


def test_scaled_robertson_is_a_change_of_variables():
    scale = np.array([1.0, 1e-4, 1e4])
    y = np.array([0.9, 2e-5, 0.1])
    f_scaled = robertson_scaled()(0.0, scale * y)
    np.testing.assert_allclose(f_scaled, scale * rhs_robertson(0.0, y), rtol=1e-14)


# ---------------------------------------------------------------- conservation along trajectories

def test_robertson_trajectory_conserves_mass():
    rtol = 1e-8
    system = robertson()
    y, _ = integrate_bdf(system, system.y0, 0.0, 40.0, ToleranceSpec.fixed(rtol, 1e-14, 3))
    assert abs(y.sum() - 1.0) <= 10 * rtol


def test_ignition_trajectory_conserves_enthalpy():
    rtol = 1e-8
    system = toy_ignition()
    y0 = system.y0
    y, _ = integrate_bdf(system, y0, 0.0, 0.01, ToleranceSpec.fixed(rtol, 1e-12, 2))
    assert y[1] > 2000.0    # ignited
    h0 = 2000.0 * y0[0] + y0[1]
    assert abs(2000.0 * y[0] + y[1] - h0) / h0 <= 10 * rtol
