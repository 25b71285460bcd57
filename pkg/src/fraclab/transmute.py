"""Heat-to-wave transmutation kernel and the observability transfer chain.

The kernel solves k_t + k_ζζ = 0 on (-L, L) × (0, T) with k(0, t) = 0 and
k_ζ(0, t) = g(t) = exp[-β(1/t + 1/(T-t))].  It is realized as the odd power
series

    k(ζ, t) = Σ_m (-1)^m g^{(m)}(t) ζ^{2m+1} / (2m+1)!,

which is entire in ζ because g is Gevrey of order 2.  The derivatives of g are
produced by a Leibniz recurrence in scaled form G_m = g^{(m)}/m!, accumulated in
multiprecision.  Truncation tails are bounded rigorously through Cauchy
estimates of g on circles in the complex t-plane.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import mpmath as mp
import numpy as np
from scipy import integrate
from scipy.special import gamma, gammaln

from .heat import ModalHeatState, heat_obs_gramian
from .operator import ConvergenceError, DomainError, check_order
from .spectral import SpectralBasis

KERNEL_DPS = 40


@dataclass(frozen=True)
class KernelSpec:
    T: float
    L: float
    beta: float
    mser: int = 24
    timeGrid: tuple[float, ...] = ()

    def __post_init__(self):
        if not (self.T > 0 and self.L > 0):
            raise DomainError("kernel needs T > 0 and L > 0")
        if not self.beta > 2 * self.L ** 2:
            raise DomainError(f"need beta > 2 L^2 = {2 * self.L ** 2:g}, got {self.beta:g}")
        if int(self.mser) != self.mser or self.mser < 4:
            raise DomainError("series order mser must be an integer >= 4")
        grid = tuple(float(t) for t in self.timeGrid)
        if any(not 0 < t < self.T for t in grid):
            raise DomainError("timeGrid must lie in the open interval (0, T)")
        object.__setattr__(self, "timeGrid", grid)
        object.__setattr__(self, "mser", int(self.mser))

    def g(self, t: float) -> float:
        return math.exp(-self.beta * (1 / t + 1 / (self.T - t)))

    def with_order(self, mser: int) -> "KernelSpec":
        return KernelSpec(self.T, self.L, self.beta, mser, self.timeGrid)


def _scaled_mp(spec: KernelSpec, t, M: int, with_scale: bool = False):
    # (m+1) G_{m+1} = Σ_{k=0}^{m} (k+1) H_{k+1} G_{m-k},  H_k = h^{(k)}/k!
    t = mp.mpf(t)
    T = mp.mpf(spec.T)
    b = mp.mpf(spec.beta)
    a, c = 1 / t, 1 / (T - t)
    H = [None]
    pa, pc = a, c
    for k in range(1, M + 2):
        pa, pc = pa * a, pc * c
        H.append(-b * ((-1) ** k * pa + pc))
    G = [mp.exp(-b * (a + c))]
    S = [G[0]]
    for m in range(M):
        terms = [(k + 1) * H[k + 1] * G[m - k] for k in range(m + 1)]
        G.append(mp.fsum(terms) / (m + 1))
        if with_scale:
            S.append(mp.fsum(abs(x) for x in terms) / (m + 1))
    return (G, S) if with_scale else G


def scaled_derivatives(spec: KernelSpec, t: float, M: int | None = None, dps: int = KERNEL_DPS,
                       check: bool = True) -> list:
    """G_m = g^{(m)}(t)/m! for m = 0..M as mp numbers at ``dps`` digits.

    With ``check``, the table is recomputed with 20 extra digits; a discrepancy
    above 1e-6 relative at some order (against the magnitude of that order's
    recurrence terms) raises ConvergenceError naming the order.
    """
    if not 0 < t < spec.T:
        raise DomainError(f"t = {t} outside (0, {spec.T})")
    M = spec.mser if M is None else int(M)
    with mp.workdps(dps):
        G = _scaled_mp(spec, t, M)
    if check:
        with mp.workdps(dps + 20):
            Gh, S = _scaled_mp(spec, t, M, with_scale=True)
            for m, (x, y, sc) in enumerate(zip(G, Gh, S)):
                err = abs(x - y)
                if err > 1e-6 * max(abs(y), mp.mpf(10) ** (-dps // 2) * sc):
                    raise ConvergenceError(f"derivative recurrence lost precision at order m={m}")
    return G


def kernel_derivatives(spec: KernelSpec, t: float, dps: int = KERNEL_DPS) -> np.ndarray:
    """g^{(m)}(t) for m = 0..mser as floats."""
    G = scaled_derivatives(spec, t, dps=dps)
    with mp.workdps(dps):
        return np.array([float(Gm * mp.factorial(m)) for m, Gm in enumerate(G)])


def tail_bound(spec: KernelSpec, zeta: float, t: float, M: int | None = None) -> float:
    """Rigorous bound on Σ_{m>M} |g^{(m)}(t)| |ζ|^{2m+1}/(2m+1)!.

    For 0 < r < min(t, T-t), |G_m| ≤ M_r r^{-m} with
    M_r ≤ exp(-β(1/(t+r) + 1/(T-t+r))) (minimum of Re(1/z) on the circle), so
    the m-th term is at most a_m = M_r r^{-m} m! |ζ|^{2m+1}/(2m+1)!.  The ratio
    a_{m+1}/a_m = ζ²/(2r(2m+3)) decreases in m: the a_m rise up to a peak and
    then fall.  With m₂ the first order past M where the ratio is ≤ 1/2, the
    tail is at most (m₂ - M - 1) a_peak + 2 a_{m₂}.  The bound is minimized
    over r.
    """
    return float(tail_bounds(spec, [zeta], t, M)[0])


def tail_bounds(spec: KernelSpec, zetas, t: float, M: int | None = None) -> np.ndarray:
    """:func:`tail_bound` for an array of ζ at one time."""
    M = spec.mser if M is None else int(M)
    z = np.abs(np.asarray(zetas, dtype=float))[:, None]
    rmax = min(t, spec.T - t)
    r = (rmax * np.geomspace(1e-4, 1 - 1e-9, 400))[None, :]
    logM = -spec.beta * (1 / (t + r) + 1 / (spec.T - t + r))
    with np.errstate(divide="ignore"):
        logz = np.log(z)

    def loga(m):
        return logM - m * np.log(r) + gammaln(m + 1) - gammaln(2 * m + 2) + (2 * m + 1) * logz

    x = z * z / (2 * r)
    m0 = M + 1
    # first order with ratio < 1 (the peak) and first with ratio <= 1/2
    m1 = np.maximum(m0, np.floor((x - 3) / 2) + 1)
    m2 = np.maximum(m0, np.ceil((2 * x - 3) / 2))
    with np.errstate(divide="ignore"):
        lead = np.log(m2 - m0) + loga(m1)
    log_tail = np.logaddexp(lead, math.log(2) + loga(m2))
    best = np.min(log_tail, axis=1)
    out = np.exp(np.minimum(best, 710.0))
    out[best >= 709] = math.inf
    out[z[:, 0] == 0] = 0.0
    return out


def _coefficients(G, M):
    # per-t Horner coefficients in ζ² for k/ζ, k_ζζ/ζ and k_t/ζ
    ck, cz, ct = [], [], []
    fm = mp.mpf(1)   # m!
    f2 = mp.mpf(1)   # (2m+1)!
    for m in range(M + 1):
        if m > 0:
            fm *= m
            f2 *= (2 * m) * (2 * m + 1)
        sgn = -1 if m % 2 else 1
        c = sgn * G[m] * fm / f2
        ck.append(c)
        if m > 0:
            cz.append(c * (2 * m) * (2 * m + 1))
        ct.append(sgn * G[m + 1] * fm * (m + 1) / f2)
    return ck, cz, ct


def _horner(coef, z2):
    acc = mp.mpf(0)
    for c in reversed(coef):
        acc = acc * z2 + c
    return acc


def _series(G, zeta, M, coef=None):
    # k, k_ζζ and k_t of the truncated series at one (ζ, t); G needs M + 2 entries
    ck, cz, ct = _coefficients(G, M) if coef is None else coef
    z = mp.mpf(zeta)
    z2 = z * z
    return z * _horner(ck, z2), z * _horner(cz, z2), z * _horner(ct, z2)


@dataclass(frozen=True)
class KernelValue:
    value: float
    tail: float
    flagged: bool


def kernel_eval(spec: KernelSpec, zeta: float, t: float, dps: int = KERNEL_DPS) -> KernelValue:
    """k(ζ, t) from the truncated series, with a rigorous tail bound.

    ``flagged`` is set when the tail bound exceeds 1e-8 |k|.
    """
    if abs(zeta) > spec.L:
        raise DomainError(f"|zeta| = {abs(zeta)} exceeds L = {spec.L}")
    G = scaled_derivatives(spec, t, spec.mser + 1, dps=dps)
    with mp.workdps(dps):
        k = float(_series(G, zeta, spec.mser)[0])
    tail = tail_bound(spec, zeta, t)
    return KernelValue(k, tail, bool(tail > 1e-8 * abs(k)))


def kernel_bound(spec: KernelSpec, zeta, t, delta: float):
    """Right side |ζ| exp[(ζ²/δ - β/(1+δ)) / min(t, T-t)] of the pointwise kernel estimate."""
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    zeta, t = np.asarray(zeta, dtype=float), np.asarray(t, dtype=float)
    mn = np.minimum(t, spec.T - t)
    return np.abs(zeta) * np.exp((zeta ** 2 / delta - spec.beta / (1 + delta)) / mn)


@dataclass
class KernelTable:
    """k on a (ζ, t) grid with tail bounds and the scaled derivative table G_m(t)."""

    spec: KernelSpec
    zetas: np.ndarray
    times: np.ndarray
    k: np.ndarray = field(repr=False)       # (nζ, nt)
    kzz: np.ndarray = field(repr=False)     # (nζ, nt)
    tail: np.ndarray = field(repr=False)    # (nζ, nt)
    scaled: np.ndarray = field(repr=False)  # (mser + 2, nt)

    @property
    def flagged(self) -> np.ndarray:
        return self.tail > 1e-8 * np.abs(self.k)

    def endpoint_check(self) -> bool:
        """g > 0 on the grid and each tabulated G_m within its Cauchy bound at the extreme times."""
        if not np.all(self.scaled[0] > 0):
            return False
        ok = True
        for j in (0, self.times.size - 1):
            t = self.times[j]
            r = 0.5 * min(t, self.spec.T - t)
            Mr = math.exp(-self.spec.beta * (1 / (t + r) + 1 / (self.spec.T - t + r)))
            m = np.arange(self.scaled.shape[0])
            ok &= bool(np.all(np.abs(self.scaled[:, j]) <= Mr * r ** (-m.astype(float)) * (1 + 1e-12)))
        return ok

    def rows(self):
        for i, z in enumerate(self.zetas):
            for j, t in enumerate(self.times):
                yield float(z), float(t), float(self.k[i, j]), float(self.tail[i, j])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["zeta", "t", "k", "tailBound"])
            for row in self.rows():
                w.writerow([repr(v) for v in row])


def kernel_table(spec: KernelSpec, zetas, times=None, dps: int = KERNEL_DPS,
                 with_tail: bool = True, check: bool = True) -> KernelTable:
    """Tabulate k and k_ζζ on a (ζ, t) grid.

    ``check`` runs the precision check of the derivative recurrence at every
    time; quadrature callers switch it off and rely on spot checks instead.
    """
    zetas = np.asarray(zetas, dtype=float)
    times = np.asarray(spec.timeGrid if times is None else times, dtype=float)
    if np.any(np.abs(zetas) > spec.L):
        raise DomainError("zeta grid exceeds [-L, L]")
    M = spec.mser
    k = np.empty((zetas.size, times.size))
    kzz = np.empty_like(k)
    tail = np.zeros_like(k)
    scaled = np.empty((M + 2, times.size))
    for j, t in enumerate(times):
        G = scaled_derivatives(spec, float(t), M + 1, dps=dps, check=check)
        with mp.workdps(dps):
            scaled[:, j] = [float(x) for x in G]
            ck, cz, _ = _coefficients(G, M)
            for i, z in enumerate(zetas):
                zm = mp.mpf(float(z))
                z2 = zm * zm
                k[i, j] = float(zm * _horner(ck, z2))
                kzz[i, j] = float(zm * _horner(cz, z2))
        if with_tail:
            tail[:, j] = tail_bounds(spec, zetas, float(t))
    return KernelTable(spec, zetas, times, k, kzz, tail, scaled)


def kernel_pde_residual(spec: KernelSpec, gridZeta, gridT, dps: int = 80,
                        fd_step: float = 1e-20) -> dict:
    """Residual of k_t + k_ζζ for the truncated series on a grid.

    Term-by-term, the truncated series leaves exactly the single term
    (-1)^M g^{(M+1)}(t) ζ^{2M+1}/(2M+1)!, evaluated here from the tabulated
    derivatives ("analytic").  A central finite-difference residual of the
    truncated series in multiprecision confirms it independently.  The larger
    of the two is returned as ``residual``.
    """
    M = spec.mser
    analytic = 0.0
    fd = 0.0
    with mp.workdps(dps):
        h = mp.mpf(fd_step) * spec.T
        hz = mp.mpf(fd_step)
        for t in np.asarray(gridT, dtype=float):
            G0 = scaled_derivatives(spec, t, M + 1, dps=dps, check=False)
            Gp = _scaled_mp(spec, mp.mpf(t) + h, M + 1)
            Gm = _scaled_mp(spec, mp.mpf(t) - h, M + 1)
            for z in np.asarray(gridZeta, dtype=float):
                term = G0[M + 1] * mp.factorial(M + 1) * mp.mpf(z) ** (2 * M + 1) / mp.factorial(2 * M + 1)
                analytic = max(analytic, float(abs(term)))
                kt = (_series(Gp, z, M)[0] - _series(Gm, z, M)[0]) / (2 * h)
                zz = mp.mpf(z)
                kzz = (_series(G0, zz + hz, M)[0] - 2 * _series(G0, zz, M)[0]
                       + _series(G0, zz - hz, M)[0]) / hz ** 2
                fd = max(fd, float(abs(kt + kzz)))
    return {"analytic": analytic, "finite_difference": fd, "residual": max(analytic, fd)}


def _gl_nodes(T: float, panels: int, order: int):
    x, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(0.0, T, panels + 1)
    a, b = edges[:-1, None], edges[1:, None]
    t = (0.5 * (b - a) * x[None, :] + 0.5 * (a + b)).ravel()
    wt = (0.5 * (b - a) * w[None, :]).ravel()
    return t, wt


@dataclass
class TransmutedSolution:
    zetas: np.ndarray
    eigenvalues: np.ndarray
    psi: np.ndarray           # (nζ, J)
    psi_zz: np.ndarray        # (nζ, J)
    ode_residual: np.ndarray  # per mode, max_ζ |ψ'' + λψ| / max_ζ |ψ|
    velocity0: np.ndarray     # ψ_j'(0) from the series
    velocity0_quad: np.ndarray  # ψ_j'(0) from adaptive quadrature of g e^{-λt}
    panels: int


def transmuted_solution(basis: SpectralBasis, q0: ModalHeatState, spec: KernelSpec, zgrid,
                        tol: float = 1e-10, order: int = 20, max_panels: int = 1024,
                        dps: int = KERNEL_DPS) -> TransmutedSolution:
    """ψ_j(ζ) = q_{0,j} ∫₀ᵀ k(ζ,t) e^{-λ_j t} dt for the modes carried by q0.

    ψ is integrated by composite Gauss-Legendre with panel doubling until
    successive levels agree to ``tol`` relative; ψ'' uses the differentiated
    series under the integral on the coarser of the two converged levels, so
    the two sides of the wave equation come from independent rules.
    """
    zgrid = np.asarray(zgrid, dtype=float)
    J = q0.M
    lam = np.asarray(basis.eigenvalues[:J], dtype=float)
    q = q0.u

    def level(panels):
        t, w = _gl_nodes(spec.T, panels, order)
        tab = kernel_table(spec, zgrid, t, dps=dps, with_tail=False, check=False)
        E = np.exp(-np.outer(t, lam)) * w[:, None]  # (nt, J)
        return tab.k @ E * q, tab.kzz @ E * q

    for tc in np.linspace(0, spec.T, 7)[1:-1]:  # spot check of the recurrence precision
        scaled_derivatives(spec, float(tc), spec.mser + 1, dps=dps)
    panels = 16
    prev, prev_zz = level(panels)
    while True:
        panels *= 2
        if panels > max_panels:
            raise ConvergenceError("transmuted quadrature did not converge")
        cur, cur_zz = level(panels)
        scale = np.maximum(np.max(np.abs(cur), axis=0), 1e-300)
        if np.all(np.max(np.abs(cur - prev), axis=0) <= tol * scale):
            break
        prev, prev_zz = cur, cur_zz
    # ψ from the finest rule, ψ'' from the coarser (independent) converged one
    psi, psi_zz = cur, prev_zz
    scale = np.max(np.abs(psi), axis=0)
    res = np.max(np.abs(psi_zz + lam[None, :] * psi), axis=0)
    ode = np.where(scale > 0, res / np.where(scale > 0, scale, 1.0), 0.0)

    t, w = _gl_nodes(spec.T, panels, order)
    g = np.array([spec.g(x) for x in t])
    vel = q * ((g * w) @ np.exp(-np.outer(t, lam)))
    velq = np.empty(J)
    for j in range(J):
        ts = min(max(math.sqrt(spec.beta / lam[j]) if lam[j] > 0 else spec.T / 2, 1e-12), spec.T)
        pts = [ts] if 0 < ts < spec.T else None
        val = integrate.quad(lambda x: spec.g(x) * math.exp(-lam[j] * x), 0, spec.T, points=pts,
                             epsabs=0, epsrel=1e-12, limit=400)[0]
        velq[j] = q[j] * val
    return TransmutedSolution(zgrid, lam, psi, psi_zz, ode, vel, velq, panels)


@dataclass
class ChainRecord:
    name: str
    lhs: float
    rhs: float
    beta: float
    sample: int

    @property
    def ratio(self) -> float:
        return self.lhs / self.rhs if self.rhs > 0 else math.inf

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs

    def to_dict(self) -> dict:
        return {"inequality": self.name, "sample": self.sample, "beta": self.beta, "lhs": self.lhs,
                "rhs": self.rhs, "ratio": self.ratio, "holds": self.holds}


@dataclass
class TransferReport:
    s: float
    J: int
    T: float
    L: float
    T0: float
    records: list[ChainRecord]
    final_constants: dict[float, float]
    max_tail_ratio: float

    @property
    def all_hold(self) -> bool:
        return all(r.holds for r in self.records)

    @property
    def constants_monotone(self) -> bool:
        b = sorted(self.final_constants)
        return all(self.final_constants[x] < self.final_constants[y] for x, y in zip(b, b[1:]))

    def to_dict(self) -> dict:
        return {"s": self.s, "J": self.J, "T": self.T, "L": self.L, "T0": self.T0,
                "records": [r.to_dict() for r in self.records],
                "final_constants": {repr(k): v for k, v in self.final_constants.items()},
                "max_tail_ratio": self.max_tail_ratio, "all_hold": self.all_hold,
                "constants_monotone": self.constants_monotone}


def final_constant(s: float, T: float, L: float, T0: float, beta: float) -> float:
    """Γ(1+s)² L³ exp(8β/T) / (3 s T (2L - T0)), the heat observability constant of the chain."""
    return float(gamma(1 + s) ** 2 * L ** 3 * math.exp(8 * beta / T) / (3 * s * T * (2 * L - T0)))


def transfer_demo(basis: SpectralBasis, J: int, T: float, T0: float, L: float | None = None,
                  betas=None, samples: np.ndarray | None = None, count: int = 10, seed: int = 0,
                  mser: int = 48, nzeta: int = 24, panels: int = 16, order: int = 20,
                  boundarySet="plus") -> TransferReport:
    """Evaluate both sides of every inequality of the wave-to-heat transfer chain.

    With q(t) = Σ_j q_j e^{-λ_j t} φ_j, W = ‖∫ k_ζ(0,t) q dt‖², the kernel
    observation K = ∫_{-L}^{L} Σ_x (x·ν) ∫ k² |q/ρ^s|² and the heat
    observation O = Σ_x (x·ν) ∫ |q/ρ^s|²:

      wave_observation   W ≤ Γ(1+s)² K / (2s(2L - T0))
      final_velocity     ‖q(T)‖² ≤ (4/T²) e^{8β/T} W
      final_kernel       ‖q(T)‖² ≤ Γ(1+s)² e^{8β/T} K / (2sT²(2L - T0))
      kernel_pointwise   ∫ k(ζ,·)² Σ_x (x·ν)|q/ρ^s|² ≤ ζ² T O   (worst ζ on the grid)
      heat_observation   ‖q(T)‖² ≤ Γ(1+s)² L³ e^{8β/T} O / (3sT(2L - T0))

    ``betas`` are multiples of L² (default 2.1, 3, 5); L defaults to T0.
    ``samples`` (rows of J coefficients) override the ``count`` random draws.
    """
    s = check_order(basis.s)
    L = float(T0 if L is None else L)
    if not 2 * L > T0:
        raise DomainError("the wave step needs 2L > T0")
    betas = [2.1, 3.0, 5.0] if betas is None else list(betas)
    if samples is None:
        samples = np.random.default_rng(seed).standard_normal((count, J))
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[1] != J:
        raise ValueError(f"samples need {J} coefficients per row")
    lam = np.asarray(basis.eigenvalues[:J], dtype=float)
    G1 = float(gamma(1 + s) ** 2)
    gram = heat_obs_gramian(basis, J, T, weighted=True, boundarySet=boundarySet)
    tr, wts = gram.traces, gram.weights  # (J, P), (P,)

    t, wt = _gl_nodes(T, panels, order)
    xz, wz = np.polynomial.legendre.leggauss(nzeta)
    z = 0.5 * L * (xz + 1)
    wz = 0.5 * L * wz
    E = np.exp(-np.outer(t, lam))  # (nt, J)

    records: list[ChainRecord] = []
    consts = {}
    tail_ratio = 0.0
    for bm in betas:
        beta = float(bm) * L ** 2
        spec = KernelSpec(T, L, beta, mser)
        for tc in np.linspace(0, T, 7)[1:-1]:  # spot check of the recurrence precision
            scaled_derivatives(spec, float(tc), mser + 1)
        tab = kernel_table(spec, z, t, check=False)
        # truncation measured against the kernel's scale on the grid
        tail_ratio = max(tail_ratio, float(np.max(tab.tail) / np.max(np.abs(tab.k))))
        g = tab.scaled[0]
        a = (g * wt) @ E  # ∫ g e^{-λ_j t}
        k2 = tab.k ** 2
        fac = math.exp(8 * beta / T)
        C = final_constant(s, T, L, T0, beta)
        consts[float(bm)] = C
        for n, qc in enumerate(samples):
            W = float(np.sum(qc ** 2 * a ** 2))
            qT = float(np.sum(qc ** 2 * np.exp(-2 * lam * T)))
            Sx = ((E * qc) @ tr) ** 2 @ wts  # Σ_x w |q/ρ^s|² at each node
            per_zeta = k2 @ (Sx * wt)
            K = 2 * float(wz @ per_zeta)  # k² is even in ζ
            O = float(qc @ gram.G @ qc)
            records.append(ChainRecord("wave_observation", W, G1 * K / (2 * s * (2 * L - T0)), beta, n))
            records.append(ChainRecord("final_velocity", qT, 4 / T ** 2 * fac * W, beta, n))
            records.append(ChainRecord("final_kernel", qT, G1 * fac * K / (2 * s * T ** 2 * (2 * L - T0)),
                                       beta, n))
            i = int(np.argmax(per_zeta / (z ** 2 * T * O)))
            records.append(ChainRecord("kernel_pointwise", float(per_zeta[i]), float(z[i] ** 2 * T * O), beta, n))
            records.append(ChainRecord("heat_observation", qT, C * O, beta, n))
    return TransferReport(s=s, J=J, T=float(T), L=L, T0=float(T0), records=records,
                          final_constants=consts, max_tail_ratio=tail_ratio)
