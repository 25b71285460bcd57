"""Discrete integral fractional Laplacian on an interval.

The operator is realized by a conforming P1 Galerkin scheme on a uniform mesh
with zero exterior values.  For hat functions the bilinear form

    (C_{1,s}/2) ∬ (u(x) - u(y)) (v(x) - v(y)) / |x - y|^{1+2s} dx dy

reduces to a Toeplitz matrix whose entries are available in closed form: in
Fourier variables the form is ∫ |ξ|^{2s} û v̄ dξ / 2π and the hat transform is
h sinc², so each entry is a fourth difference of the homogeneous distribution
whose transform is |ξ|^{2s-4}.  A pointwise principal-value quadrature is kept
alongside as an independent oracle.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
from scipy import integrate
from scipy.special import gamma

SCHEME_VERSION = "p1-toeplitz-1"


class DomainError(ValueError):
    """Raised when a parameter lies outside its admissible range."""


class AssemblyError(RuntimeError):
    """Raised when the assembled pair fails its structural self-checks."""


class ConvergenceError(RuntimeError):
    """Raised when an adaptive quadrature does not settle within tolerance."""


def check_order(s: float) -> float:
    s = float(s)
    if not (0.0 < s < 1.0) or not math.isfinite(s):
        raise DomainError(f"fractional order s={s!r} must lie in (0, 1)")
    return s


@dataclass(frozen=True)
class FracOrder:
    """Exponent s of (-Δ)^s with its regime tag."""

    s: float

    def __post_init__(self):
        check_order(self.s)

    @property
    def regime(self) -> str:
        if abs(self.s - 0.5) < 1e-14:
            return "half"
        return "sub-half" if self.s < 0.5 else "super-half"

    def __float__(self) -> float:
        return float(self.s)


@dataclass(frozen=True)
class IntervalDomain:
    """Interval (a, b) with the boundary split by the sign of x·ν.

    ν(a) = -1 and ν(b) = +1.  Points with x·ν > 0 form the plus boundary.
    """

    left: float = 0.0
    right: float = 1.0

    def __post_init__(self):
        if not self.left < self.right:
            raise DomainError(f"need left < right, got ({self.left}, {self.right})")

    @property
    def length(self) -> float:
        return self.right - self.left

    @property
    def points(self) -> np.ndarray:
        return np.array([self.left, self.right])

    @property
    def normals(self) -> np.ndarray:
        return np.array([-1.0, 1.0])

    @property
    def weights(self) -> np.ndarray:
        """x·ν at the two endpoints."""
        return self.points * self.normals

    @property
    def plus_boundary(self) -> tuple[int, ...]:
        return tuple(int(i) for i in np.flatnonzero(self.weights > 0))

    @property
    def minus_boundary(self) -> tuple[int, ...]:
        return tuple(int(i) for i in np.flatnonzero(self.weights <= 0))

    def boundary_indices(self, which: str | tuple | list = "plus") -> tuple[int, ...]:
        if isinstance(which, str):
            if which == "plus":
                return self.plus_boundary
            if which == "minus":
                return self.minus_boundary
            if which == "all":
                return (0, 1)
            raise ValueError(f"unknown boundary set {which!r}")
        idx = tuple(int(i) for i in which)
        if any(i not in (0, 1) for i in idx):
            raise ValueError(f"boundary indices must be 0 (left) or 1 (right), got {idx}")
        return idx


@dataclass(frozen=True)
class Mesh:
    """Uniform interior nodes; the endpoints carry the zero exterior value."""

    n: int
    h: float
    nodes: np.ndarray = field(repr=False)

    @classmethod
    def uniform(cls, domain: IntervalDomain, n: int) -> "Mesh":
        n = int(n)
        if n < 1:
            raise DomainError(f"mesh needs n >= 1 interior nodes, got {n}")
        h = domain.length / (n + 1)
        nodes = domain.left + h * np.arange(1, n + 1)
        return cls(n=n, h=h, nodes=nodes)

    def distance_to_boundary(self, domain: IntervalDomain) -> np.ndarray:
        return np.minimum(self.nodes - domain.left, domain.right - self.nodes)


@dataclass(frozen=True)
class OperatorPair:
    """Stiffness A and mass B of the discrete Dirichlet fractional Laplacian."""

    stiffness: np.ndarray = field(repr=False)
    mass: np.ndarray = field(repr=False)
    domain: IntervalDomain
    mesh: Mesh
    s: float

    @property
    def n(self) -> int:
        return self.mesh.n

    def apply(self, u: np.ndarray) -> np.ndarray:
        """Nodal values of the discrete operator, B⁻¹ A u."""
        return sla.solve(self.mass, self.stiffness @ u, assume_a="pos")


def normalization_constant(s: float, N: int = 1) -> float:
    """C_{N,s} = s 2^{2s} Γ((2s+N)/2) / (π^{N/2} Γ(1-s))."""
    s = check_order(s)
    if int(N) != N or N < 1:
        raise DomainError(f"dimension N={N!r} must be a positive integer")
    return s * 2.0 ** (2 * s) * gamma((2 * s + N) / 2) / (math.pi ** (N / 2) * gamma(1 - s))


def _homogeneous(x: np.ndarray, s: float) -> np.ndarray:
    # Distribution with Fourier transform |ξ|^{2s-4}, up to the (harmless) polynomials
    # annihilated by the fourth difference below.
    x = np.abs(np.asarray(x, dtype=float))
    if abs(s - 0.5) < 1e-12:
        safe = np.where(x > 0, x, 1.0)
        return np.where(x > 0, x * x * np.log(safe), 0.0) / (2 * math.pi)
    return -gamma(2 * s - 3) * math.sin(math.pi * s) / math.pi * x ** (3 - 2 * s)


def stiffness_row(n: int, h: float, s: float) -> np.ndarray:
    """First row of the Toeplitz stiffness matrix for hats of width 2h."""
    k = np.arange(n, dtype=float)
    d = (1.0, -4.0, 6.0, -4.0, 1.0)
    acc = np.zeros(n)
    for m, dm in enumerate(d):
        acc += dm * _homogeneous(k + m - 2, s)
    return h ** (1 - 2 * s) * acc


def stiffness_entry_fourier(k: int, h: float, s: float, cut: float = 60.0) -> float:
    """Entry A_{i,i+k} by direct Fourier quadrature; slow, for testing only."""
    # (1/π) ∫_0^∞ ξ^{2s} h² sinc⁴(ξh/2) cos(kξh) dξ with ξ = 2η/h.  Beyond ``cut`` the
    # product sin⁴η cos(2kη) is expanded into pure cosines and integrated by QAWF.
    def amp(eta):
        return eta ** (2 * s) * np.sinc(eta / math.pi) ** 4

    scale = (2.0 / h) ** (2 * s) * 2.0 * h / math.pi
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        head, tail = _fourier_parts(amp, k, s, cut)
    return scale * (head + tail)


def _fourier_parts(amp, k, s, cut):
    if k == 0:
        head = integrate.quad(amp, 0, cut, limit=2000, epsabs=0, epsrel=1e-13)[0]
    else:
        head = integrate.quad(amp, 0, cut, weight="cos", wvar=2 * k, limit=2000,
                              epsabs=0, epsrel=1e-13)[0]
    terms = [(2 * k, 3 / 8), (2 * k + 2, -1 / 4), (2 * k - 2, -1 / 4),
             (2 * k + 4, 1 / 16), (2 * k - 4, 1 / 16)]
    tail = 0.0
    for omega, coef in terms:
        omega = abs(omega)
        if omega == 0:
            tail += coef * cut ** (2 * s - 3) / (3 - 2 * s)
        else:
            tail += coef * integrate.quad(lambda e: e ** (2 * s - 4), cut, np.inf,
                                          weight="cos", wvar=omega, limlst=200)[0]
    return head, tail


def assemble_operator(domain: IntervalDomain, mesh: Mesh, s: float,
                      check_definite: bool = True) -> OperatorPair:
    """Assemble the P1 stiffness and mass matrices for (-Δ)^s on ``domain``."""
    s = check_order(s)
    if mesh.n < 8:
        raise DomainError(f"assembly needs n >= 8 interior nodes, got {mesh.n}")
    if abs(mesh.h * (mesh.n + 1) - domain.length) > 1e-12 * domain.length:
        raise DomainError("mesh spacing does not match the domain length")

    A = sla.toeplitz(stiffness_row(mesh.n, mesh.h, s))
    mrow = np.zeros(mesh.n)
    mrow[0] = 4 * mesh.h / 6
    mrow[1] = mesh.h / 6
    B = sla.toeplitz(mrow)

    scale = np.max(np.abs(A))
    asym = np.max(np.abs(A - A.T))
    if not np.isfinite(scale) or asym > 1e-10 * scale:
        raise AssemblyError(f"stiffness symmetry residual {asym / scale:.3e} exceeds 1e-10")
    if check_definite:
        try:
            sla.cholesky(A, lower=True)
        except sla.LinAlgError as exc:
            raise AssemblyError("stiffness matrix is not positive definite") from exc
    A.setflags(write=False)
    B.setflags(write=False)
    return OperatorPair(stiffness=A, mass=B, domain=domain, mesh=mesh, s=s)


def build_operator(s: float, n: int, left: float = 0.0, right: float = 1.0) -> OperatorPair:
    """Shorthand for assembling on a uniform mesh of (left, right)."""
    domain = IntervalDomain(left, right)
    return assemble_operator(domain, Mesh.uniform(domain, n), s)


def interpolate(op: OperatorPair, u) -> np.ndarray:
    return np.asarray(u(op.mesh.nodes), dtype=float)


def pointwise_fraclap(u, x: float, s: float, tol: float = 1e-8,
                      support: tuple[float, float] = (-1.0, 1.0),
                      breakpoints: tuple[float, ...] = (),
                      eps0: float | None = None, max_levels: int = 12) -> float:
    """Principal-value quadrature of (-Δ)^s u at a single point.

    ``u`` must vanish outside ``support``.  For interior points the integrand is
    written with the symmetric second difference 2u(x) - u(x+r) - u(x-r); the
    far tail (both neighbours outside the support) is integrated in closed form.
    The near field |r| < ε is excised and ε is driven to zero by Richardson
    extrapolation with exponents 2-2s and 4-2s.

    Parameters
    ----------
    u : callable
        Scalar function with compact support.
    x : float
        Evaluation point, inside or outside the support.
    s : float
        Fractional order in (0, 1).
    tol : float
        Absolute agreement required between successive extrapolants.
    breakpoints : tuple of float
        Points where u is not smooth; the integration is split there.
    """
    s = check_order(s)
    lo, hi = support
    c = normalization_constant(s, 1)
    quad_opts = dict(limit=400, epsabs=tol * 1e-3, epsrel=1e-13)

    if x <= lo or x >= hi:
        pts = sorted({lo, hi, *[p for p in breakpoints if lo < p < hi]})
        total = 0.0
        for p, q in zip(pts[:-1], pts[1:]):
            total += integrate.quad(lambda z: u(z) / abs(x - z) ** (1 + 2 * s), p, q, **quad_opts)[0]
        return -c * total

    ux = float(u(x))
    R = max(x - lo, hi - x)
    kinks = {x - lo, hi - x}
    kinks |= {abs(p - x) for p in breakpoints}
    kinks = sorted(k for k in kinks if 0 < k < R)
    tail = ux * R ** (-2 * s) / s

    def integrand(r):
        return (2 * ux - u(x + r) - u(x - r)) / r ** (1 + 2 * s)

    dist = min(x - lo, hi - x, *[abs(p - x) for p in breakpoints if p != x] or [np.inf])
    eps = eps0 if eps0 is not None else min(0.25 * dist, 1e-2)

    def outer(e):
        pts = [e] + [k for k in kinks if k > e] + [R]
        acc = 0.0
        for p, q in zip(pts[:-1], pts[1:]):
            acc += integrate.quad(integrand, p, q, **quad_opts)[0]
        return acc

    # I(ε) = I₀ - c₁ ε^{2-2s} - c₂ ε^{4-2s} - ...; inner slivers are added incrementally.
    values = [outer(eps)]
    epsilons = [eps]
    p1, p2 = 2 - 2 * s, 4 - 2 * s
    prev_est = None
    for _ in range(max_levels):
        e_new = epsilons[-1] / 2
        sliver = integrate.quad(integrand, e_new, epsilons[-1], **quad_opts)[0]
        values.append(values[-1] + sliver)
        epsilons.append(e_new)
        if len(values) >= 3:
            i0, i1, i2 = values[-3:]
            r1 = (2 ** p1 * i1 - i0) / (2 ** p1 - 1)
            r2 = (2 ** p1 * i2 - i1) / (2 ** p1 - 1)
            est = (2 ** p2 * r2 - r1) / (2 ** p2 - 1)
            if prev_est is not None and abs(est - prev_est) <= tol:
                return c * (est + tail)
            prev_est = est
    raise ConvergenceError(
        f"principal value at x={x} did not settle to tol={tol} after {max_levels} halvings")


def export_operator(op: OperatorPair, path: str | Path) -> Path:
    """Write the pair to an ``.npz`` container with a JSON header.

    The header records n, h, a, b, s and the scheme version.  Matrices are
    stored as raw float64 arrays, so a round trip is bit-exact.
    """
    path = Path(path)
    header = {"n": op.mesh.n, "h": op.mesh.h, "a": op.domain.left, "b": op.domain.right,
              "s": op.s, "scheme-version": SCHEME_VERSION}
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)),
                 stiffness=op.stiffness, mass=op.mass)
    return path


def import_operator(path: str | Path) -> OperatorPair:
    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        A = np.array(data["stiffness"])
        B = np.array(data["mass"])
    if header.get("scheme-version") != SCHEME_VERSION:
        raise ValueError(f"unsupported scheme version {header.get('scheme-version')!r}")
    domain = IntervalDomain(header["a"], header["b"])
    mesh = Mesh.uniform(domain, header["n"])
    if mesh.h != header["h"] or A.shape != (mesh.n, mesh.n) or B.shape != A.shape:
        raise ValueError("operator container header does not match its matrices")
    A.setflags(write=False)
    B.setflags(write=False)
    return OperatorPair(stiffness=A, mass=B, domain=domain, mesh=mesh, s=check_order(header["s"]))
