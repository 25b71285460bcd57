import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fraclab.heat import (ModalHeatState, duality_constant, duality_residual, evolve_heat,
                          heat_gramian_entry_quadrature, heat_obs_gramian, obs_constant_heat,
                          propagate_controlled)

from conftest import basis


def test_duality_constant_values():
    assert duality_constant(0.5) == pytest.approx(math.pi / 2, rel=1e-15)
    assert abs(duality_constant(0.999) - 1) <= 5e-3
    assert duality_constant(0.3) == duality_constant(0.3)


@given(st.floats(0.01, 0.99))
def test_duality_constant_positive(s):
    assert duality_constant(s) > 0


def test_state_validation():
    with pytest.raises(ValueError):
        ModalHeatState([np.nan])
    with pytest.raises(ValueError):
        ModalHeatState(np.zeros((2, 2)))


def test_evolve_identity_and_halving():
    lam = np.array([3.0, 10.0])
    s0 = ModalHeatState([1.0, 2.0])
    np.testing.assert_array_equal(evolve_heat(s0, lam, 0.0).u, s0.u)
    half = evolve_heat(ModalHeatState([1.0]), lam, math.log(2) / 3.0)
    assert half.u[0] == pytest.approx(0.5, rel=1e-15)
    with pytest.raises(ValueError):
        evolve_heat(s0, lam, -0.1)


@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.floats(0, 3), st.floats(0, 3))
def test_norm_nonincreasing(u, t1, t2):
    lam = np.array([1.0, 4.0, 9.0])
    a = evolve_heat(ModalHeatState(u), lam, min(t1, t2))
    b = evolve_heat(ModalHeatState(u), lam, max(t1, t2))
    assert b.norm <= a.norm * (1 + 1e-15)


def test_gramian_closed_form_vs_quadrature(basis75):
    g = heat_obs_gramian(basis75, 6, 0.8, weighted=True, withConstant=True)
    for i in range(6):
        for j in range(i, 6):
            q = heat_gramian_entry_quadrature(g, i, j)
            assert abs(g.G[i, j] - q) <= 1e-9 * max(abs(q), np.abs(g.G).max() * 1e-6)


def test_gramian_zero_horizon_and_psd(basis75):
    assert np.all(heat_obs_gramian(basis75, 5, 0.0).G == 0)
    G = heat_obs_gramian(basis75, 8, 2.0).G
    assert np.linalg.eigvalsh(G).min() >= -1e-14 * np.abs(G).max()
    with pytest.raises(ValueError):
        heat_obs_gramian(basis75, 0, 1.0)


def test_kappa_heat_monotone(basis75):
    Tg = np.array([0.05, 0.1, 0.2, 0.5])
    k4 = obs_constant_heat(basis75, 4, Tg).kappa
    k8 = obs_constant_heat(basis75, 8, Tg).kappa
    assert np.all(np.diff(k4) > 0)
    assert np.all(k8 <= k4 * (1 + 1e-10))


def test_kappa_heat_grid_span(basis75):
    with pytest.raises(ValueError):
        obs_constant_heat(basis75, 4, [0.1, 0.2])


def test_free_propagation(basis75):
    u0 = ModalHeatState(np.linspace(1, 0.1, 10))
    a = propagate_controlled(basis75, u0, None, 0.0, 0.7)
    b = evolve_heat(u0, basis75.eigenvalues, 0.7)
    np.testing.assert_allclose(a.u, b.u, rtol=1e-15)


def _bump(t):
    return np.array([math.sin(3 * t) + 0.5])


def _ramp(t):
    return np.array([t ** 2])


def test_linearity_and_superposition(basis75):
    u0 = ModalHeatState(np.random.default_rng(7).standard_normal(8))
    z = ModalHeatState(np.zeros(8))
    T = 0.9
    both = propagate_controlled(basis75, u0, lambda t: 2 * _bump(t) - _ramp(t), 0.0, T)
    free = propagate_controlled(basis75, u0, None, 0.0, T)
    fb = propagate_controlled(basis75, z, _bump, 0.0, T)
    fr = propagate_controlled(basis75, z, _ramp, 0.0, T)
    np.testing.assert_allclose(both.u, free.u + 2 * fb.u - fr.u, atol=1e-12 * np.abs(both.u).max())


def test_duality_self_test(basis75):
    u0 = ModalHeatState(np.random.default_rng(8).standard_normal(6))
    vT = np.random.default_rng(9).standard_normal(6)
    r = duality_residual(basis75, u0, _bump, vT, 0.6)
    assert r["relative"] <= 1e-9


def test_window_validation(basis75):
    with pytest.raises(ValueError):
        propagate_controlled(basis75, ModalHeatState(np.zeros(4)), None, 1.0, 0.5)
    with pytest.raises(ValueError):
        propagate_controlled(basis(0.75, 256, 4), ModalHeatState(np.zeros(8)), None, 0.0, 1.0)
