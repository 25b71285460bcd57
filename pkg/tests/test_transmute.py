import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, strategies as st

from fraclab.heat import ModalHeatState
from fraclab.operator import DomainError
from fraclab.transmute import (KernelSpec, final_constant, kernel_bound, kernel_derivatives,
                               kernel_eval, kernel_pde_residual, kernel_table, tail_bound,
                               transfer_demo, transmuted_solution)

SPEC = KernelSpec(T=2.0, L=1.0, beta=3.0, mser=24)


def test_cutoff_midpoint():
    assert SPEC.g(1.0) == pytest.approx(math.exp(-4 * 3.0 / 2.0), rel=1e-15)
    assert kernel_derivatives(SPEC, 1.0)[1] == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("t", [0.4, 1.0, 1.7])
def test_derivatives_vs_numerical(t):
    d = kernel_derivatives(SPEC, t)
    g = lambda x: mp.exp(-3 * (1 / x + 1 / (2 - x)))
    with mp.workdps(40):
        for m in range(5):
            ref = float(mp.diff(g, mp.mpf(t), m))
            assert abs(d[m] - ref) <= 1e-4 * max(abs(ref), 1e-12)


def test_kernel_zero_and_identity():
    assert kernel_eval(SPEC, 0.0, 0.8).value == 0.0
    for t in (0.3, 1.0, 1.6):
        assert kernel_eval(SPEC, 1e-8, t).value / 1e-8 == pytest.approx(SPEC.g(t), rel=1e-12)


@given(st.floats(0.0, 1.0), st.floats(0.1, 1.9))
def test_kernel_odd(z, t):
    a = kernel_eval(SPEC, z, t).value
    b = kernel_eval(SPEC, -z, t).value
    assert a == -b


def test_kernel_pointwise_bound():
    z = np.linspace(-1, 1, 9)
    t = np.linspace(0.1, 1.9, 9)
    tab = kernel_table(SPEC, z, t)
    B = kernel_bound(SPEC, z[:, None], t[None, :], 0.9)
    assert np.all(np.abs(tab.k) + tab.tail <= B * (1 + 1e-12))
    with pytest.raises(ValueError):
        kernel_bound(SPEC, z, t, 1.0)


def test_pde_residual_and_order():
    zs, ts = np.linspace(-1, 1, 5), np.linspace(0.2, 1.8, 5)
    r20 = kernel_pde_residual(SPEC.with_order(20), zs, ts)["residual"]
    r40 = kernel_pde_residual(SPEC.with_order(40), zs, ts)["residual"]
    assert r20 <= 1e-10
    assert r40 <= r20


def test_tail_decreases_with_order():
    tails = [tail_bound(SPEC, 1.0, 0.7, M) for M in (8, 16, 24, 32)]
    assert all(a > b for a, b in zip(tails, tails[1:]))


def test_endpoint_check_and_flags():
    tab = kernel_table(SPEC, [0.0, 0.5, 1.0], [0.05, 1.0, 1.95])
    assert tab.endpoint_check()
    assert tab.flagged.shape == (3, 3)


def test_domain_errors():
    with pytest.raises(DomainError):
        KernelSpec(T=2.0, L=1.0, beta=2.0)
    with pytest.raises(DomainError):
        kernel_eval(SPEC, 1.5, 1.0)
    with pytest.raises(DomainError):
        KernelSpec(T=2.0, L=1.0, beta=3.0, timeGrid=(0.0,))
    with pytest.raises(DomainError):
        kernel_eval(SPEC, 0.5, 2.0)


def test_transmuted_zero_and_origin(basis75):
    z = np.linspace(-0.5, 0.5, 11)
    zero = transmuted_solution(basis75, ModalHeatState(np.zeros(2)), SPEC, z)
    assert np.all(zero.psi == 0)
    sol = transmuted_solution(basis75, ModalHeatState([1.0, 0.0]), SPEC, z)
    assert sol.psi[5, 0] == 0.0
    np.testing.assert_allclose(sol.velocity0, sol.velocity0_quad, rtol=1e-9)


def test_transmuted_single_mode_ode(basis75):
    spec = SPEC.with_order(48)
    sol = transmuted_solution(basis75, ModalHeatState([1.0]), spec, np.linspace(-0.5, 0.5, 11))
    assert sol.ode_residual[0] <= 1e-7


def test_final_constant_monotone_in_beta():
    c = [final_constant(0.75, 1.0, 2.2, 2.2, b) for b in (10.0, 15.0, 25.0)]
    assert c[0] < c[1] < c[2]


def test_transfer_chain(basis75):
    rep = transfer_demo(basis75, 4, 1.0, 2.2, count=4, seed=0)
    assert rep.all_hold
    assert rep.constants_monotone
    assert rep.max_tail_ratio < 1e-8
    with pytest.raises(DomainError):
        transfer_demo(basis75, 4, 1.0, 2.2, L=1.0)
