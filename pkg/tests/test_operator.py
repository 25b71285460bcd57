import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.interpolate import CubicSpline

from fraclab.operator import (AssemblyError, DomainError, FracOrder, IntervalDomain, Mesh,
                              assemble_operator, build_operator, check_order, export_operator,
                              import_operator, interpolate, normalization_constant,
                              pointwise_fraclap, stiffness_entry_fourier, stiffness_row)

from conftest import basis, operator

orders = st.floats(min_value=0.05, max_value=0.95)


def test_normalization_half():
    assert normalization_constant(0.5, 1) == pytest.approx(1 / math.pi, rel=1e-15)


def test_normalization_quarter_against_mpmath():
    with mp.workdps(40):
        s = mp.mpf("0.25")
        ref = s * 2 ** (2 * s) * mp.gamma((2 * s + 1) / 2) / (mp.sqrt(mp.pi) * mp.gamma(1 - s))
    assert normalization_constant(0.25, 1) == pytest.approx(float(ref), rel=1e-12)


def test_normalization_deterministic():
    assert normalization_constant(0.5, 1) == normalization_constant(0.5, 1)


@pytest.mark.parametrize("s", [0.0, 1.0, -0.2, 1.3, float("nan")])
def test_order_domain(s):
    with pytest.raises(DomainError):
        check_order(s)


@given(orders)
def test_regime_tag(s):
    tag = FracOrder(s).regime
    assert tag == ("sub-half" if s < 0.5 else "half" if s == 0.5 else "super-half")


def test_partition_unit_interval():
    d = IntervalDomain(0.0, 1.0)
    assert d.plus_boundary == (1,)
    assert d.minus_boundary == (0,)
    d = IntervalDomain(-1.0, 1.0)
    assert d.plus_boundary == (0, 1)


def test_mesh_invariants():
    d = IntervalDomain(-1.0, 2.0)
    m = Mesh.uniform(d, 37)
    assert np.all(np.diff(m.nodes) > 0)
    assert m.nodes[0] > d.left and m.nodes[-1] < d.right
    assert m.h * (m.n + 1) == pytest.approx(d.length, rel=1e-15)


def test_stiffness_row_against_fourier():
    h, s = 0.01, 0.5
    row = stiffness_row(6, h, s)
    for k in range(3):
        assert row[k] == pytest.approx(stiffness_entry_fourier(k, h, s), rel=1e-8)


@pytest.mark.parametrize("s", [0.25, 0.5, 0.6, 0.75, 0.9])
@pytest.mark.parametrize("n", [64, 128, 256, 512])
def test_symmetric_positive_definite(s, n):
    op = operator(s, n)
    A, B = op.stiffness, op.mass
    assert np.max(np.abs(A - A.T)) <= 1e-12 * np.max(np.abs(A))
    assert np.max(np.abs(B - B.T)) <= 1e-12 * np.max(np.abs(B))
    assert np.linalg.eigvalsh(A).min() > 0
    assert np.linalg.eigvalsh(B).min() > 0


def test_small_mesh_rejected():
    with pytest.raises(DomainError):
        assemble_operator(IntervalDomain(0, 1), Mesh.uniform(IntervalDomain(0, 1), 4), 0.5)


def test_constant_image_of_bump():
    # (−Δ)^s (1−x²)^s_+ = Γ(2s+1) on (−1,1); for s = 1/2 that is 1
    op = operator(0.5, 256, -1.0, 1.0)
    v = op.apply(interpolate(op, lambda x: np.maximum(1 - x * x, 0) ** 0.5))
    inner = np.abs(op.mesh.nodes) < 0.8
    assert np.max(np.abs(v[inner] - 1.0)) < 0.02


def test_smallest_eigenvalue_self_convergence():
    from scipy.linalg import eigh
    vals = []
    for n in (512, 1024):
        op = operator(0.5, n)
        vals.append(eigh(op.stiffness, op.mass, eigvals_only=True, subset_by_index=[0, 0])[0])
    assert abs(vals[1] - vals[0]) / vals[0] <= 0.01


def test_pointwise_zero_function():
    assert pointwise_fraclap(lambda x: 0.0 * x, 0.3, 0.5) == 0.0


def test_pointwise_bump_half():
    u = lambda x: np.maximum(1 - x * x, 0) ** 0.5
    assert pointwise_fraclap(u, 0.0, 0.5, tol=1e-9) == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("s", [0.25, 0.75])
def test_pointwise_bump_gamma(s):
    u = lambda x: np.maximum(1 - x * x, 0) ** s
    assert pointwise_fraclap(u, 0.4, s, tol=1e-9) == pytest.approx(math.gamma(2 * s + 1), rel=1e-7)


def test_pointwise_outside_support_negative():
    u = lambda x: np.maximum(1 - x * x, 0) ** 0.5
    assert pointwise_fraclap(u, 1.5, 0.5) < 0


def test_pointwise_first_eigenfunction():
    b = basis(0.75, 1024, 4)
    phi = b.eigenvectors[:, 0]
    nodes = b.mesh.nodes
    # C² interpolant: the kinks of the P1 interpolant make (−Δ)^{0.75} singular at the nodes
    cs = CubicSpline(np.r_[0.0, nodes, 1.0], np.r_[0.0, phi, 0.0])
    u = lambda x: np.where((np.asarray(x) > 0) & (np.asarray(x) < 1), cs(np.clip(x, 0, 1)), 0.0)
    val = pointwise_fraclap(u, 0.5, 0.75, tol=1e-7, support=(0.0, 1.0))
    assert val == pytest.approx(b.eigenvalues[0] * u(0.5), rel=0.01)


def test_dilation_covariance():
    from scipy.linalg import eigh
    s = 0.6
    lam = []
    for right in (1.0, 2.0):
        op = operator(s, 256, 0.0, right)
        lam.append(eigh(op.stiffness, op.mass, eigvals_only=True, subset_by_index=[0, 4]))
    np.testing.assert_allclose(lam[1], lam[0] * 2 ** (-2 * s), rtol=0.01)


@pytest.mark.parametrize("seed", range(3))
def test_oracle_consistency_random_bumps(seed):
    # smooth compactly supported test functions; error decreases under refinement
    r = np.random.default_rng(seed)
    c, w = r.uniform(-0.3, 0.3), r.uniform(0.3, 0.6)
    s = 0.5
    u = lambda x: np.where(np.abs(x - c) < w, np.exp(-1 / np.maximum(1 - ((x - c) / w) ** 2, 1e-300)), 0.0)
    xs = c + np.array([-0.5, 0.0, 0.5]) * w
    ref = np.array([pointwise_fraclap(u, x, s, tol=1e-10, breakpoints=(c - w, c + w)) for x in xs])
    errs = []
    for n in (127, 255, 511):
        op = operator(s, n, -1.0, 1.0)
        v = op.apply(interpolate(op, u))
        errs.append(np.max(np.abs(np.interp(xs, op.mesh.nodes, v) - ref)))
    assert errs[0] > errs[1] > errs[2]


def test_export_round_trip(tmp_path):
    op = operator(0.75, 64)
    p = export_operator(op, tmp_path / "op.npz")
    back = import_operator(p)
    assert np.array_equal(back.stiffness, op.stiffness)
    assert np.array_equal(back.mass, op.mass)
    assert back.s == op.s and back.mesh.n == op.mesh.n and back.domain == op.domain


def test_apply_linear():
    op = operator(0.6, 64)
    r = np.random.default_rng(0)
    u, v = r.standard_normal((2, 64))
    np.testing.assert_allclose(op.apply(2 * u + v), 2 * op.apply(u) + op.apply(v), rtol=1e-10, atol=1e-9)
