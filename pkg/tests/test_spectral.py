import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fraclab.spectral import (boundary_traces, compute_basis, exact_trace_magnitude, export_basis,
                              fit_trace, import_basis, regularity_diagnostics, solve_eigens, weyl_fit)

from conftest import basis, operator


def test_half_order_positive_increasing():
    b = basis(0.5, 1024, 10, -1.0, 1.0)
    assert np.all(b.eigenvalues > 0)
    assert np.all(np.diff(b.eigenvalues) > 0)


@pytest.mark.parametrize("s", [0.25, 0.75])
def test_orthonormal_and_rayleigh(s):
    op = operator(s, 512)
    b = basis(s, 512, 20)
    V = b.eigenvectors
    np.testing.assert_allclose(V.T @ op.mass @ V, np.eye(20), atol=1e-10)
    energy = np.einsum("ij,ik,kj->j", V, op.stiffness, V)
    np.testing.assert_allclose(energy, b.eigenvalues, rtol=1e-10)


def test_eigen_residual():
    op = operator(0.6, 512)
    b = solve_eigens(op, 12)
    for j in range(12):
        phi = b.eigenvectors[:, j]
        r = op.stiffness @ phi - b.eigenvalues[j] * (op.mass @ phi)
        assert np.linalg.norm(r) <= 1e-9 * b.eigenvalues[j] * np.linalg.norm(phi)


def test_weyl_three_quarters():
    fit = weyl_fit(basis(0.75, 1024, 40).eigenvalues)
    assert abs(fit["slope"] - 1.5) <= 0.1
    assert (fit["jmin"], fit["jmax"]) == (10, 40)


def test_eigenvalue_self_convergence():
    a = basis(0.6, 512, 10).eigenvalues
    b = basis(0.6, 1024, 10).eigenvalues
    assert np.max(np.abs(b - a) / a) <= 0.01


def test_trace_scaling_linear():
    b = basis(0.75, 512, 4)
    phi = b.eigenvectors[:, 1]
    t1, _ = fit_trace(phi, b, 1)
    t2, _ = fit_trace(3.0 * phi, b, 1)
    assert t2 == pytest.approx(3.0 * t1, rel=1e-13)


def test_trace_cauchy_sequence():
    vals = [basis(0.5, n, 1).traces.values[0, 1] for n in (256, 512, 1024)]
    vals = np.abs(vals)
    gaps = np.abs(np.diff(vals))
    assert gaps[0] >= 1.5 * gaps[1]


@pytest.mark.parametrize("s", [0.5, 0.75])
def test_symmetric_interval_traces(s):
    b = basis(s, 1024, 6, -1.0, 1.0)
    tv = np.abs(b.traces.values)
    np.testing.assert_allclose(tv[:, 0], tv[:, 1], rtol=1e-3)


def test_traces_match_pohozaev_magnitude():
    b = basis(0.75, 1024, 8)
    ref = exact_trace_magnitude(b.eigenvalues, 0.75, b.domain)
    np.testing.assert_allclose(np.abs(b.traces.values[:, 1]), ref, rtol=2e-3)


def test_trace_stability_in_fit_nodes():
    b = basis(0.75, 1024, 6)
    t4 = boundary_traces(b, K=4, method="fit").values[:, 1]
    t6 = boundary_traces(b, K=6, method="fit").values[:, 1]
    np.testing.assert_allclose(t6, t4, rtol=1e-2)


def test_weights_follow_partition():
    b = basis(0.75, 256, 3)
    np.testing.assert_array_equal(b.traces.weights, [0.0, 1.0])
    b = basis(0.5, 256, 3, -1.0, 1.0)
    np.testing.assert_array_equal(b.traces.weights, [1.0, 1.0])


def test_regularity_three_quarters():
    b = basis(0.75, 1024, 24)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        rep = regularity_diagnostics(b, operator(0.75, 1024))
    assert rep["exponents"]["gradient_l2_ratio"]["slope"] <= 0.65


def test_regularity_small_order_sup_norm():
    b = basis(0.2, 1024, 24)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        rep = regularity_diagnostics(b)
    assert rep["exponents"]["sup_norm"]["slope"] <= 1 / (4 * 0.2) + 0.15


def test_regularity_scale_invariant():
    from dataclasses import replace
    b = basis(0.75, 512, 20)
    b2 = replace(b, eigenvectors=2 * b.eigenvectors)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        r1, r2 = regularity_diagnostics(b), regularity_diagnostics(b2)
    for k in r1["exponents"]:
        assert r2["exponents"][k]["slope"] == pytest.approx(r1["exponents"][k]["slope"], abs=1e-12)


def test_regularity_needs_twenty_modes():
    with pytest.raises(ValueError):
        regularity_diagnostics(basis(0.75, 256, 8))


def test_basis_round_trip(tmp_path):
    b = basis(0.6, 128, 5)
    back = import_basis(export_basis(b, tmp_path / "b.json"))
    assert np.array_equal(back.eigenvalues, b.eigenvalues)
    assert np.array_equal(back.eigenvectors, b.eigenvectors)
    assert np.array_equal(back.traces.values, b.traces.values)


@given(st.floats(0.3, 0.95), st.floats(0.5, 3.0))
def test_weyl_fit_recovers_power_law(p, c):
    j = np.arange(1, 41)
    fit = weyl_fit(c * j ** p)
    assert fit["slope"] == pytest.approx(p, abs=1e-12)
