"""Modal fractional heat equation, boundary observability and controlled propagation.

Boundary-controlled ("large") solutions are never discretized in space.  They
are defined by transposition: projected on a tracked window of M modes,

    u_j(t₁) = e^{-λ_j(t₁-t₀)} u_j(t₀) + 𝒜(s) Σ_{x∈∂Ω⁺} t_j(x) ∫_{t₀}^{t₁} f(x,t) e^{-λ_j(t₁-t)} dt,

with 𝒜(s) = Γ(s)Γ(1+s).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import mpmath as mp
import numpy as np
from scipy import integrate, stats
from scipy.special import gamma

from ._precision import smallest_eigenvalue
from .operator import check_order
from .spectral import SpectralBasis


@dataclass(frozen=True)
class ModalHeatState:
    u: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float)
        if u.ndim != 1 or not np.all(np.isfinite(u)):
            raise ValueError("heat state must be a finite 1-D coefficient vector")
        object.__setattr__(self, "u", u)

    @property
    def M(self) -> int:
        return self.u.size

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.u))


def duality_constant(s: float) -> float:
    """𝒜(s) = Γ(s) Γ(1+s)."""
    s = check_order(s)
    return float(gamma(s) * gamma(1 + s))


def evolve_heat(state: ModalHeatState, lam: np.ndarray, dt: float) -> ModalHeatState:
    if dt < 0:
        raise ValueError("heat propagation needs dt >= 0")
    lam = np.asarray(lam, dtype=float)[: state.M]
    return ModalHeatState(state.u * np.exp(-lam * dt), state.time + dt)


def _relax(x: np.ndarray, T: float, dtype=float) -> np.ndarray:
    # (1 - e^{-xT}) / x with the x → 0 limit T
    x = np.asarray(x, dtype=dtype)
    T = dtype(T)
    out = np.empty_like(x)
    small = np.abs(x * T) < 1e-12
    out[small] = T
    out[~small] = -np.expm1(-x[~small] * T) / x[~small]
    return out


@dataclass(frozen=True)
class HeatGramian:
    """G_ij = c Σ_x w(x) t_i(x) t_j(x) (1 - e^{-(λ_i+λ_j)T}) / (λ_i+λ_j)."""

    G: np.ndarray = field(repr=False)
    T: float
    weighted: bool
    constant: float
    boundarySet: tuple[int, ...]
    eigenvalues: np.ndarray = field(repr=False)
    traces: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)

    @property
    def J(self) -> int:
        return self.G.shape[0]


def heat_obs_gramian(basis: SpectralBasis, J: int, T: float, weighted: bool = False,
                     withConstant: bool = False, boundarySet="plus") -> HeatGramian:
    """Boundary observation form of the first J heat modes over [0, T].

    ``withConstant`` multiplies by 𝒜(s), the normalization of the control
    functional; observability normalizations are left to the caller.
    """
    if not 1 <= J <= basis.count:
        raise ValueError(f"need 1 <= J <= {basis.count}, got {J}")
    if T < 0:
        raise ValueError("horizon T must be nonnegative")
    idx = basis.domain.boundary_indices(boundarySet)
    tr = basis.trace_matrix(J, idx)
    w = basis.domain.weights[list(idx)] if weighted else np.ones(len(idx))
    lam = np.asarray(basis.eigenvalues[:J], dtype=float)
    c = duality_constant(basis.s) if withConstant else 1.0
    G = c * ((tr * w) @ tr.T) * _relax(lam[:, None] + lam[None, :], T)
    return HeatGramian(G=G, T=float(T), weighted=weighted, constant=c, boundarySet=idx,
                       eigenvalues=lam, traces=tr, weights=w)


def heat_gramian_entry_quadrature(gram: HeatGramian, i: int, j: int) -> float:
    """One Gramian entry by adaptive time quadrature (oracle for the closed form)."""
    tt = float(np.sum(gram.weights * gram.traces[i] * gram.traces[j]))
    li, lj = gram.eigenvalues[i], gram.eigenvalues[j]
    val = integrate.quad(lambda t: math.exp(-(li + lj) * t), 0, gram.T,
                         epsabs=0, epsrel=1e-13, limit=200)[0]
    return gram.constant * tt * val


def _final_state_form_mp(gram: HeatGramian):
    # entries t_i t_j (e^{(λi+λj)T} - 1)/(λi+λj): observation per unit final-state norm
    J = gram.J
    lam = [mp.mpf(float(x)) for x in gram.eigenvalues]
    tr = [[mp.mpf(float(v)) for v in row] for row in gram.traces]
    w = [mp.mpf(float(v)) for v in gram.weights]
    T = mp.mpf(gram.T)
    A = mp.matrix(J, J)
    for i in range(J):
        for j in range(i, J):
            tt = mp.fsum(w[p] * tr[i][p] * tr[j][p] for p in range(len(w)))
            L = lam[i] + lam[j]
            A[i, j] = A[j, i] = gram.constant * tt * mp.expm1(L * T) / L
    return A


@dataclass
class HeatObservability:
    J: int
    Tgrid: np.ndarray
    kappa: np.ndarray
    precision: list[str]
    saturated: list[bool]
    slope: float
    intercept: float
    r2: float


def obs_constant_heat(basis: SpectralBasis, J: int, Tgrid, weighted: bool = True,
                      boundarySet="plus") -> HeatObservability:
    """κ_heat(T, J) = min Σ_x w ∫₀ᵀ |q/ρ^s|² over solutions with ‖q(·,T)‖ = 1.

    Substituting q₀ = e^{λT} y turns the Gramian G into D G D with
    D = diag(e^{λ_j T}); κ_heat is its smallest eigenvalue.  The blow-up is then
    fitted as log(1/κ) = Ĉ/T + c.
    """
    Tgrid = np.asarray(Tgrid, dtype=float)
    if Tgrid.size < 2 or Tgrid.max() < 10 * Tgrid.min() * (1 - 1e-12):
        raise ValueError("Tgrid must span at least one decade")
    kap, prec, sat = [], [], []
    for T in Tgrid:
        g = heat_obs_gramian(basis, J, float(T), weighted=weighted, boundarySet=boundarySet)
        lam = g.eigenvalues
        tt = (g.traces * g.weights) @ g.traces.T
        L = lam[:, None] + lam[None, :]
        A = g.constant * tt * np.expm1(L * T) / L
        r = smallest_eigenvalue(A, lambda g=g: _final_state_form_mp(g))
        kap.append(r.value)
        prec.append(r.precision)
        sat.append(r.value < 1e-300)
    kap = np.array(kap)
    ok = (kap > 1e-300) & np.isfinite(kap)
    fit = stats.linregress(1 / Tgrid[ok], np.log(1 / kap[ok]))
    return HeatObservability(J=J, Tgrid=Tgrid, kappa=kap, precision=prec, saturated=sat,
                             slope=float(fit.slope), intercept=float(fit.intercept),
                             r2=float(fit.rvalue ** 2))


def _mp_exp_gram(lam_a, lam_b, tr_a, tr_b, T, shift_a=0.0, shift_b=0.0):
    """mp matrix Σ_x a_i(x) b_j(x) e^{-μ_i s_a} e^{-λ_j s_b} (1 - e^{-(μ_i+λ_j)T})/(μ_i+λ_j).

    Evaluated at the working precision of the caller.
    """
    la = [mp.mpf(float(x)) for x in lam_a]
    lb = [mp.mpf(float(x)) for x in lam_b]
    ta = [[mp.mpf(float(v)) for v in row] for row in np.atleast_2d(tr_a)]
    tb = [[mp.mpf(float(v)) for v in row] for row in np.atleast_2d(tr_b)]
    T = mp.mpf(T)
    ea = [mp.exp(-x * shift_a) for x in la]
    eb = [mp.exp(-x * shift_b) for x in lb]
    K = mp.matrix(len(la), len(lb))
    for i in range(len(la)):
        for j in range(len(lb)):
            L = la[i] + lb[j]
            rel = -mp.expm1(-L * T) / L if L != 0 else T
            K[i, j] = mp.fsum(a * b for a, b in zip(ta[i], tb[j])) * ea[i] * eb[j] * rel
    return K


def _exp_family(f) -> bool:
    return all(hasattr(f, k) for k in ("coefficients", "eigenvalues", "traces", "t0", "t1"))


def control_response(f, lam_track: np.ndarray, tr_track: np.ndarray, t0: float, t1: float) -> np.ndarray:
    """Σ_x t_j(x) ∫_{t₀}^{t₁} f(x,t) e^{-λ_j(t₁-t)} dt for each tracked mode j.

    ``tr_track`` holds the tracked traces at the control's boundary points.
    """
    if _exp_family(f):
        p, q = max(t0, f.t0), min(t1, f.t1)
        if q <= p:
            return np.zeros(lam_track.size)
        # exact window length and shifts when the window is the control's full support
        span = getattr(f, "length", f.t1 - f.t0) if (p, q) == (f.t0, f.t1) else q - p
        s_c = 0.0 if q == f.t1 else f.t1 - q
        s_t = 0.0 if q == t1 else t1 - q
        if np.asarray(f.coefficients).dtype == object:
            with mp.workdps(getattr(f, "dps", None) or mp.mp.dps):
                K = _mp_exp_gram(f.eigenvalues, lam_track, f.traces, tr_track, span, s_c, s_t)
                c = list(f.coefficients)
                return np.array([float(mp.fsum(c[i] * K[i, j] for i in range(len(c))))
                                 for j in range(len(lam_track))])
        # long-double coefficients are evaluated in long double throughout
        dt = np.longdouble if np.asarray(f.coefficients).dtype == np.longdouble else float
        mu = np.asarray(f.eigenvalues, dtype=dt)
        lt = np.asarray(lam_track, dtype=dt)
        c = np.asarray(f.coefficients, dtype=dt)
        # ∫_p^q e^{-μ_i(f.t1 - t)} e^{-λ_j(t1 - t)} dt
        decay_i = np.exp(-mu * dt(s_c))
        decay_j = np.exp(-lt * dt(s_t))
        I = decay_i[:, None] * decay_j[None, :] * _relax(mu[:, None] + lt[None, :], span, dt)
        coupling = np.asarray(f.traces, dtype=dt) @ np.asarray(tr_track, dtype=dt).T
        return np.einsum("i,ij,ij->j", c, coupling, I)

    def integrand(t):
        vals = np.atleast_1d(np.asarray(f(t), dtype=float))
        return (tr_track @ vals) * np.exp(-lam_track * (t1 - t))

    val, err = integrate.quad_vec(integrand, t0, t1, epsabs=1e-14, epsrel=1e-12, limit=400)
    if not np.isfinite(err) or err > 1e-8 * max(1.0, float(np.max(np.abs(val)))):
        raise RuntimeError(f"control quadrature did not converge (error estimate {err:.2e})")
    return val


def propagate_controlled(basis: SpectralBasis, u0: ModalHeatState, f, t0: float, t1: float,
                         M: int | None = None, boundarySet="plus") -> ModalHeatState:
    """Transposition propagator of the boundary-controlled heat equation on M modes.

    ``f`` is either a closed-form control (attributes coefficients, eigenvalues,
    traces, t0, t1), evaluated exactly, or a callable t ↦ values at the boundary
    points, integrated adaptively.  ``None`` means no control.
    """
    M = u0.M if M is None else int(M)
    if M > basis.count or M > u0.M:
        raise ValueError(f"tracked window M={M} exceeds the basis or state size")
    if t1 < t0:
        raise ValueError("need t1 >= t0")
    lam = np.asarray(basis.eigenvalues[:M], dtype=float)
    if f is None:
        return ModalHeatState(u0.u[:M] * np.exp(-lam * (t1 - t0)), u0.time + (t1 - t0))
    which = getattr(f, "points", boundarySet)
    tr = basis.trace_matrix(M, which)
    resp = control_response(f, lam, tr, t0, t1)
    dt = np.longdouble if resp.dtype == np.longdouble else float
    u = np.asarray(u0.u[:M], dtype=dt) * np.exp(-np.asarray(lam, dtype=dt) * dt(t1 - t0))
    u = u + dt(duality_constant(basis.s)) * resp
    return ModalHeatState(np.asarray(u, dtype=float), u0.time + (t1 - t0))


def duality_residual(basis: SpectralBasis, u0: ModalHeatState, f, vT: np.ndarray, T: float,
                     boundarySet="plus") -> dict:
    """Residual of 𝒜∫∫ f (v/ρ^s) + ∫u₀ v(0) - ∫u(T) v_T for v_T in the span of len(vT) modes.

    The boundary pairing is computed by adaptive time quadrature and the final
    state by the closed-form propagator, so the two sides are independent.
    """
    vT = np.asarray(vT, dtype=float)
    J = vT.size
    lam = np.asarray(basis.eigenvalues[:J])
    which = getattr(f, "points", boundarySet)
    tr = basis.trace_matrix(J, which)
    A = duality_constant(basis.s)

    def pairing(t):
        v_tr = (vT * np.exp(-lam * (T - t))) @ tr  # v/ρ^s at each boundary point
        return float(np.sum(np.atleast_1d(f(t)) * v_tr))

    t_lo = getattr(f, "t0", 0.0)
    t_hi = getattr(f, "t1", T)
    bnd = A * integrate.quad(pairing, max(0.0, t_lo), min(T, t_hi), epsabs=0, epsrel=1e-13,
                             limit=400)[0]
    init = float(np.sum(u0.u[:J] * vT * np.exp(-lam * T)))
    uT = propagate_controlled(basis, u0, f, 0.0, T, M=max(J, u0.M), boundarySet=boundarySet)
    fin = float(np.sum(uT.u[:J] * vT))
    scale = max(abs(bnd), abs(init), abs(fin), 1e-300)
    return {"boundary": bnd, "initial": init, "final": fin,
            "residual": abs(bnd + init - fin), "relative": abs(bnd + init - fin) / scale}
