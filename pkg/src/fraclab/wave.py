"""Modal fractional wave equation: propagation, energy identities, observability.

A finite-mode solution p = Σ_j p_j(t) φ_j with p_j'' + λ_j p_j = 0 is tracked
exactly through its coefficients.  Boundary observations Σ_x w(x) ∫₀ᵀ |p/ρ^s|² dt
are quadratic forms in (a, b) whose time integrals are trigonometric and are
evaluated in closed form.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import mpmath as mp
import numpy as np
from scipy import integrate
from scipy.special import gamma, roots_legendre

from ._precision import smallest_eigenvalue
from .operator import check_order
from .spectral import SpectralBasis

_SMALL = 1e-8


@dataclass(frozen=True)
class ModalWaveState:
    a: np.ndarray
    b: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        b = np.asarray(self.b, dtype=float)
        if a.shape != b.shape or a.ndim != 1:
            raise ValueError("position and velocity coefficients must be 1-D of equal length")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValueError("wave state has non-finite entries")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def J(self) -> int:
        return self.a.size

    def scaled(self, alpha: float) -> "ModalWaveState":
        return ModalWaveState(alpha * self.a, alpha * self.b, self.time)

    @property
    def vector(self) -> np.ndarray:
        return np.r_[self.a, self.b]


@dataclass(frozen=True)
class WaveEnergy:
    kinetic: float
    fractional: float

    @property
    def total(self) -> float:
        return self.kinetic + self.fractional


def evolve_wave(state: ModalWaveState, lam: np.ndarray, t: float) -> ModalWaveState:
    """Advance each mode by the exact solution of p'' + λ p = 0 over a time t."""
    if t < 0:
        raise ValueError("wave propagation needs t >= 0")
    w = np.sqrt(np.asarray(lam, dtype=float)[: state.J])
    c, s = np.cos(w * t), np.sin(w * t)
    a = state.a * c + state.b * s / w
    b = -state.a * w * s + state.b * c
    return ModalWaveState(a, b, state.time + t)


def wave_energy(state: ModalWaveState, lam: np.ndarray) -> WaveEnergy:
    lam = np.asarray(lam, dtype=float)[: state.J]
    return WaveEnergy(kinetic=0.5 * float(np.sum(state.b ** 2)),
                      fractional=0.5 * float(np.sum(lam * state.a ** 2)))


def _sinc_int(w: np.ndarray, T: float) -> np.ndarray:
    # ∫₀ᵀ cos(w t) dt = sin(wT)/w
    w = np.asarray(w, dtype=float)
    out = np.empty_like(w)
    small = np.abs(w) < _SMALL
    big = ~small
    out[big] = np.sin(w[big] * T) / w[big]
    out[small] = T - w[small] ** 2 * T ** 3 / 6
    return out


def _cos_int(w: np.ndarray, T: float) -> np.ndarray:
    # ∫₀ᵀ sin(w t) dt = (1 - cos wT)/w = 2 sin²(wT/2)/w
    w = np.asarray(w, dtype=float)
    out = np.empty_like(w)
    small = np.abs(w) < _SMALL
    big = ~small
    out[big] = 2 * np.sin(w[big] * T / 2) ** 2 / w[big]
    out[small] = w[small] * T ** 2 / 2
    return out


def trig_blocks(omega: np.ndarray, T: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Time integrals ∫cos·cos, ∫cos·sin/ω_j, ∫sin/ω_i·sin/ω_j over [0, T]."""
    wi = omega[:, None]
    wj = omega[None, :]
    cc = 0.5 * (_sinc_int(wi - wj, T) + _sinc_int(wi + wj, T))
    ss = 0.5 * (_sinc_int(wi - wj, T) - _sinc_int(wi + wj, T)) / (wi * wj)
    cs = 0.5 * (_cos_int(wj + wi, T) + _cos_int(wj - wi, T)) / wj
    return cc, cs, ss


def _trig_blocks_mp(omega, T):
    J = len(omega)
    T = mp.mpf(T)
    cc = mp.matrix(J, J)
    cs = mp.matrix(J, J)
    ss = mp.matrix(J, J)

    def S(w):
        return T if w == 0 else mp.sin(w * T) / w

    def C(w):
        return mp.mpf(0) if w == 0 else 2 * mp.sin(w * T / 2) ** 2 / w

    for i in range(J):
        for j in range(J):
            wi, wj = omega[i], omega[j]
            cc[i, j] = (S(wi - wj) + S(wi + wj)) / 2
            ss[i, j] = (S(wi - wj) - S(wi + wj)) / (2 * wi * wj)
            cs[i, j] = (C(wj + wi) + C(wj - wi)) / (2 * wj)
    return cc, cs, ss


@dataclass(frozen=True)
class ObservabilityGramian:
    """Σ_x w(x) ∫₀ᵀ |Σ_j t_j(x) p_j(t)|² dt as a form in z = (a, b)."""

    J: int
    T: float
    matrixPos: np.ndarray = field(repr=False)
    matrixVel: np.ndarray = field(repr=False)
    matrixCross: np.ndarray = field(repr=False)
    weighted: bool
    boundarySet: tuple[int, ...]
    eigenvalues: np.ndarray = field(repr=False)
    traces: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)

    @property
    def full(self) -> np.ndarray:
        return np.block([[self.matrixPos, self.matrixCross],
                         [self.matrixCross.T, self.matrixVel]])

    def quadratic_form(self, state: ModalWaveState) -> float:
        z = state.vector
        return float(z @ self.full @ z)

    def tt(self) -> np.ndarray:
        return (self.traces * self.weights) @ self.traces.T

    def build_mp(self):
        """Full 2J×2J matrix in the current mpmath precision."""
        J = self.J
        omega = [mp.sqrt(mp.mpf(float(x))) for x in self.eigenvalues]
        tr = [[mp.mpf(float(v)) for v in row] for row in self.traces]
        w = [mp.mpf(float(v)) for v in self.weights]
        tt = mp.matrix(J, J)
        for i in range(J):
            for j in range(J):
                tt[i, j] = mp.fsum(w[p] * tr[i][p] * tr[j][p] for p in range(len(w)))
        cc, cs, ss = _trig_blocks_mp(omega, self.T)
        Q = mp.matrix(2 * J, 2 * J)
        for i in range(J):
            for j in range(J):
                Q[i, j] = tt[i, j] * cc[i, j]
                Q[J + i, J + j] = tt[i, j] * ss[i, j]
                Q[i, J + j] = tt[i, j] * cs[i, j]
                Q[J + j, i] = Q[i, J + j]
        return Q


def wave_obs_gramian(basis: SpectralBasis, J: int, T: float, boundarySet="plus",
                     weighted: bool = True) -> ObservabilityGramian:
    """Closed-form boundary observation Gramian of the first J modes on [0, T].

    ``boundarySet`` is "plus", "minus", "all" or a tuple of endpoint indices;
    with ``weighted`` each endpoint carries x·ν, otherwise weight 1.
    """
    if J > basis.count or J < 1:
        raise ValueError(f"need 1 <= J <= {basis.count}, got {J}")
    if T < 0:
        raise ValueError("horizon T must be nonnegative")
    idx = basis.domain.boundary_indices(boundarySet)
    tr = basis.trace_matrix(J, idx)
    w = basis.domain.weights[list(idx)] if weighted else np.ones(len(idx))
    lam = np.asarray(basis.eigenvalues[:J], dtype=float)
    tt = (tr * w) @ tr.T
    cc, cs, ss = trig_blocks(np.sqrt(lam), T)
    return ObservabilityGramian(J=J, T=float(T), matrixPos=tt * cc, matrixVel=tt * ss,
                                matrixCross=tt * cs, weighted=weighted, boundarySet=idx,
                                eigenvalues=lam, traces=tr, weights=w)


def observation_integral(basis: SpectralBasis, state: ModalWaveState, T: float,
                         boundarySet="plus", weighted: bool = True, epsrel: float = 1e-12) -> float:
    """Same quantity as the Gramian form, by adaptive time quadrature."""
    idx = basis.domain.boundary_indices(boundarySet)
    tr = basis.trace_matrix(state.J, idx)
    w = basis.domain.weights[list(idx)] if weighted else np.ones(len(idx))
    om = np.sqrt(basis.eigenvalues[: state.J])

    def f(t):
        p = state.a * np.cos(om * t) + state.b * np.sin(om * t) / om
        obs = p @ tr
        return float(np.sum(w * obs ** 2))

    pieces = max(1, int(math.ceil(T * om.max() / math.pi)))
    edges = np.linspace(0, T, pieces + 1)
    return sum(integrate.quad(f, lo, hi, epsabs=0, epsrel=epsrel, limit=200)[0]
               for lo, hi in zip(edges[:-1], edges[1:]))


def obs_constant_wave(gram: ObservabilityGramian, lam: np.ndarray | None = None,
                      rel_floor: float = 1e-9) -> float:
    """κ(T, J): min Q(a, b) over states with E_s(0) = ½(Σλ_j a_j² + Σ b_j²) = 1."""
    return obs_constant_wave_detail(gram, lam, rel_floor).value


def obs_constant_wave_detail(gram: ObservabilityGramian, lam: np.ndarray | None = None,
                             rel_floor: float = 1e-9):
    lam = gram.eigenvalues if lam is None else np.asarray(lam, dtype=float)[: gram.J]
    if gram.T == 0:
        from ._precision import EigResult
        return EigResult(0.0, "float64", 0.0)
    d = 1 / np.sqrt(0.5 * np.r_[lam, np.ones(gram.J)])
    Qn = d[:, None] * gram.full * d[None, :]

    def build():
        Q = gram.build_mp()
        dm = [1 / mp.sqrt(mp.mpf(float(x)) / 2) for x in lam] + [mp.sqrt(2)] * gram.J
        n = 2 * gram.J
        for i in range(n):
            for j in range(n):
                Q[i, j] *= dm[i] * dm[j]
        return Q

    return smallest_eigenvalue(Qn, build, rel_floor=rel_floor)


def equipartition_residual(state: ModalWaveState, lam: np.ndarray, T: float) -> float:
    """|-∫∫|p_t|² + ∫∫|∇^s p|² + [∫ p_t p]₀ᵀ| / (E_s(0) T), evaluated mode by mode."""
    lam = np.asarray(lam, dtype=float)[: state.J]
    E0 = wave_energy(state, lam).total
    if E0 == 0:
        return 0.0
    w = np.sqrt(lam)
    a, b = state.a, state.b
    c2 = T / 2 + np.sin(2 * w * T) / (4 * w)
    s2 = T / 2 - np.sin(2 * w * T) / (4 * w)
    sc = np.sin(w * T) ** 2 / (2 * w)
    pp = a ** 2 * c2 + (b / w) ** 2 * s2 + 2 * a * (b / w) * sc
    dd = (a * w) ** 2 * s2 + b ** 2 * c2 - 2 * a * w * b * sc
    end = evolve_wave(state, lam, T)
    bracket = np.sum(end.b * end.a) - np.sum(b * a)
    res = -np.sum(dd) + np.sum(lam * pp) + bracket
    return float(abs(res) / (E0 * T))


def moment_matrix(basis: SpectralBasis, J: int) -> np.ndarray:
    """D_ij = ∫ x φ_i φ_j' dx for the P1 reconstructions, evaluated exactly."""
    V = np.asarray(basis.eigenvectors[:, :J])
    h = basis.mesh.h
    xs = np.r_[basis.domain.left, basis.mesh.nodes, basis.domain.right]
    Vf = np.vstack([np.zeros(J), V, np.zeros(J)])
    xl, xr = xs[:-1, None], xs[1:, None]
    vl, vr = Vf[:-1], Vf[1:]
    slope = (vr - vl) / h
    mom = h / 6 * (xl * (2 * vl + vr) + xr * (vl + 2 * vr))
    return mom.T @ slope


def pohozaev_residual(basis: SpectralBasis, state: ModalWaveState, T: float,
                      timeQuadOrder: int | None = None, detail: bool = False):
    """Relative gap in the multiplier identity

        Γ(1+s)²/2 Σ_x (x·ν) ∫₀ᵀ |p/ρ^s|² dt = sT E_s(0) + [∫ p_t (x·∇p + (1-s)/2 p) dx]₀ᵀ.

    The boundary side uses the closed-form Gramian, or composite Gauss-Legendre
    in time when ``timeQuadOrder`` is given.  The bracket uses the exact moment
    matrix of the P1 reconstruction.
    """
    J = state.J
    if J > basis.count:
        raise ValueError(f"state has {J} modes but the basis only {basis.count}")
    s = basis.s
    lam = np.asarray(basis.eigenvalues[:J])
    if timeQuadOrder is None:
        gram = wave_obs_gramian(basis, J, T, boundarySet="all", weighted=True)
        obs = gram.quadratic_form(state)
    else:
        tr = basis.trace_matrix(J, "all")
        w = basis.domain.weights
        om = np.sqrt(lam)
        panels = max(1, int(math.ceil(2 * T * om.max() / math.pi)))
        gx, gw = roots_legendre(int(timeQuadOrder))
        edges = np.linspace(0, T, panels + 1)
        mid = (edges[:-1] + edges[1:]) / 2
        half = (edges[1:] - edges[:-1]) / 2
        tq = (mid[:, None] + half[:, None] * gx).ravel()
        wq = (half[:, None] * gw).ravel()
        P = state.a * np.cos(np.outer(tq, om)) + state.b * np.sin(np.outer(tq, om)) / om
        obs = float(np.sum(wq * np.sum(w * (P @ tr) ** 2, axis=1)))
    lhs = gamma(1 + s) ** 2 / 2 * obs

    D = moment_matrix(basis, J)
    E0 = wave_energy(state, lam).total
    end = evolve_wave(state, lam, T)

    def xi(st):
        return st.b @ D @ st.a + (1 - s) / 2 * (st.b @ st.a)

    rhs = s * T * E0 + xi(end) - xi(state)
    scale = max(abs(lhs), abs(rhs))
    res = 0.0 if scale == 0 else abs(lhs - rhs) / scale
    if detail:
        return {"residual": res, "lhs": lhs, "rhs": rhs}
    return res


def alpha_exponent(s: float) -> float:
    """Interpolation exponent α(s), defined for s in [1/4, 1/2)."""
    s = check_order(s)
    if 0.25 <= s < 1 / 3:
        return 1 / s - 3
    if 1 / 3 <= s < 0.5:
        return 1 - 1 / (3 * s)
    raise ValueError(f"α(s) is only defined for s in [1/4, 1/2), got {s}")


def gamma_exponent(s: float, N: int = 1) -> float:
    """Exponent γexp(s) in the minimal observability time T₀(J) = C λ_J^γ."""
    s = check_order(s)
    if s > 0.5:
        return 1 - s
    if s == 0.5:
        return 1.0
    if s >= 0.25:
        return 1 + alpha_exponent(s) / 2
    return N / s + 1


@dataclass
class T0Estimate:
    s: float
    Jlist: list[int]
    Tgrid: np.ndarray
    kappa: np.ndarray  # shape (len(Jlist), len(Tgrid))
    precision: list[list[str]]
    T0: dict[int, float | None]
    gamma_hat: float | None
    gamma_ref: float | None
    eps0: float

    def rows(self):
        for a, J in enumerate(self.Jlist):
            for b, T in enumerate(self.Tgrid):
                yield J, float(T), float(self.kappa[a, b]), self.precision[a][b]


def kappa_table(basis: SpectralBasis, Jlist, Tgrid, boundarySet="plus", weighted=True):
    kap = np.zeros((len(Jlist), len(Tgrid)))
    prec = []
    for a, J in enumerate(Jlist):
        row = []
        for b, T in enumerate(Tgrid):
            g = wave_obs_gramian(basis, J, float(T), boundarySet, weighted)
            r = obs_constant_wave_detail(g)
            kap[a, b] = r.value
            row.append(r.precision)
        prec.append(row)
    return kap, prec


def estimate_T0(basis: SpectralBasis, Jlist, Tgrid, eps0: float = 1e-3,
                boundarySet="plus", weighted: bool = True) -> T0Estimate:
    """Empirical minimal observation time per J and the fitted exponent γ̂.

    T0emp(J) is the first grid time where κ(T, J)/T reaches ε₀ times its grid
    maximum.  γ̂ is the slope of log T0emp(J) against log λ_J.
    """
    if eps0 <= 0:
        raise ValueError("threshold eps0 must be positive")
    Tgrid = np.asarray(Tgrid, dtype=float)
    Jlist = [int(J) for J in Jlist]
    kap, prec = kappa_table(basis, Jlist, Tgrid, boundarySet, weighted)
    T0: dict[int, float | None] = {}
    for a, J in enumerate(Jlist):
        ratio = kap[a] / Tgrid
        top = ratio.max()
        hit = np.flatnonzero(ratio >= eps0 * top) if top > 0 else []
        T0[J] = float(Tgrid[hit[0]]) if len(hit) else None
    found = [(basis.eigenvalues[J - 1], T0[J]) for J in Jlist if T0[J] is not None]
    gamma_hat = None
    if len(found) >= 2:
        x, y = np.log(np.array(found)).T
        gamma_hat = float(np.polyfit(x, y, 1)[0])
    try:
        gref = gamma_exponent(basis.s)
    except ValueError:
        gref = None
    return T0Estimate(s=basis.s, Jlist=Jlist, Tgrid=Tgrid, kappa=kap, precision=prec, T0=T0,
                      gamma_hat=gamma_hat, gamma_ref=gref, eps0=eps0)
