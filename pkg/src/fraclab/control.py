"""Low-frequency HUM null controls and the Lebeau-Robbiano iteration.

The HUM control of the first J modes over a horizon of length T is the trace
of the optimal adjoint state, f = Σ_i c_i t_i e^{-λ_i(t₁-t)} on ∂Ω⁺, where c
solves G c = -d with G the heat Gramian scaled by 𝒜(s) and d_j = e^{-λ_j T} u₀_j.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import mpmath as mp
import numpy as np
from scipy import stats

from .heat import (ModalHeatState, _mp_exp_gram, _relax, duality_constant, evolve_heat,
                   heat_obs_gramian, propagate_controlled)
from .operator import ConvergenceError
from .spectral import SpectralBasis


class UnobservableError(RuntimeError):
    """Raised when every spectral direction of the HUM Gramian falls below the cutoff."""


@dataclass(frozen=True)
class ControlSignal:
    """f(x, t) = Σ_j c_j t_j(x) e^{-λ_j(t₁-t)} on the boundary points ``points``, t in [t₀, t₁]."""

    coefficients: np.ndarray
    eigenvalues: np.ndarray
    traces: np.ndarray  # (J, P)
    t0: float
    t1: float
    points: tuple[int, ...] = (1,)
    sample_dt: float | None = None
    dps: int | None = None  # decimal precision of multiprecision coefficients
    horizon: float | None = None  # exact t₁ - t₀ (float subtraction can differ in the last bit)

    @property
    def length(self) -> float:
        return self.t1 - self.t0 if self.horizon is None else self.horizon

    @property
    def J(self) -> int:
        return self.coefficients.size

    @property
    def multiprecision(self) -> bool:
        return self.coefficients.dtype == object

    def __call__(self, t: float) -> np.ndarray:
        if t < self.t0 or t > self.t1:
            return np.zeros(self.traces.shape[1])
        if self.multiprecision:
            with mp.workdps(self.dps or mp.mp.dps):
                e = [mp.exp(-mp.mpf(float(l)) * (self.t1 - t)) for l in self.eigenvalues]
                return np.array([float(mp.fsum(c * ei * float(v)
                                               for c, ei, v in zip(self.coefficients, e, col)))
                                 for col in self.traces.T])
        # long-double coefficients are summed in long double: large cancelling terms are common
        dtype = np.longdouble if self.coefficients.dtype == np.longdouble else float
        lam = np.asarray(self.eigenvalues, dtype=dtype)
        e = np.exp(-lam * (dtype(self.t1) - dtype(t)))
        return np.asarray((self.coefficients * e) @ np.asarray(self.traces, dtype=dtype), dtype=float)

    def norm_sq(self) -> float:
        """‖f‖² over [t₀, t₁] × points, in closed form."""
        if self.multiprecision:
            with mp.workdps(self.dps or mp.mp.dps):
                c = list(self.coefficients)
                K = _mp_exp_gram(self.eigenvalues, self.eigenvalues, self.traces, self.traces,
                                 self.length)
                J = len(c)
                return float(max(mp.fsum(c[i] * K[i, j] * c[j] for i in range(J) for j in range(J)), 0))
        ld = np.longdouble
        lam = np.asarray(self.eigenvalues, dtype=ld)
        tr = np.asarray(self.traces, dtype=ld)
        K = (tr @ tr.T) * _relax(lam[:, None] + lam[None, :], self.length, ld)
        c = np.asarray(self.coefficients, dtype=ld)
        return float(max(c @ K @ c, 0.0))

    def norm(self) -> float:
        return math.sqrt(self.norm_sq())

    def scaled(self, alpha: float) -> "ControlSignal":
        a = mp.mpf(alpha) if self.multiprecision else alpha
        return ControlSignal(a * self.coefficients, self.eigenvalues, self.traces,
                             self.t0, self.t1, self.points, self.sample_dt, self.dps, self.horizon)

    def samples(self, dt: float | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Uniform time samples (t, f(t)) including both ends of the horizon."""
        dt = dt or self.sample_dt or (self.t1 - self.t0) / 100
        n = max(1, int(round((self.t1 - self.t0) / dt)))
        ts = np.linspace(self.t0, self.t1, n + 1)
        return ts, np.array([self(t) for t in ts])

    def to_dict(self) -> dict:
        if self.multiprecision:
            # decimal strings at the working precision of the coefficients
            digits = (self.dps or mp.mp.dps) + 5
            return {"coefficients": [mp.nstr(c, digits) for c in self.coefficients],
                    "eigenvalues": self.eigenvalues.tolist(), "traces": self.traces.tolist(),
                    "t0": self.t0, "t1": self.t1, "horizon": self.length,
                    "points": list(self.points)}
        # long-double coefficients are split into a float64 pair hi + lo (lossless)
        hi = np.asarray(self.coefficients, dtype=float)
        lo = np.asarray(np.asarray(self.coefficients, dtype=np.longdouble) - hi, dtype=float)
        return {"coefficients": hi.tolist(), "coefficients_lo": lo.tolist(),
                "eigenvalues": self.eigenvalues.tolist(), "traces": self.traces.tolist(),
                "t0": self.t0, "t1": self.t1, "horizon": self.length, "points": list(self.points)}

    @classmethod
    def from_dict(cls, d: dict) -> "ControlSignal":
        if d["coefficients"] and isinstance(d["coefficients"][0], str):
            digits = max(len(x) for x in d["coefficients"])
            with mp.workdps(digits):
                c = np.array([mp.mpf(x) for x in d["coefficients"]], dtype=object)
            return cls(c, np.array(d["eigenvalues"], dtype=float),
                       np.array(d["traces"], dtype=float).reshape(c.size, -1),
                       float(d["t0"]), float(d["t1"]), tuple(d["points"]), dps=digits,
                       horizon=d.get("horizon"))
        c = np.array(d["coefficients"], dtype=float)
        if any(d.get("coefficients_lo", [])):
            c = c.astype(np.longdouble) + np.array(d["coefficients_lo"], dtype=np.longdouble)
        return cls(c, np.array(d["eigenvalues"], dtype=float),
                   np.array(d["traces"], dtype=float).reshape(c.size, -1),
                   float(d["t0"]), float(d["t1"]), tuple(d["points"]), horizon=d.get("horizon"))

    @classmethod
    def zero(cls, basis: SpectralBasis, t0: float, t1: float, which="plus") -> "ControlSignal":
        idx = basis.domain.boundary_indices(which)
        return cls(np.zeros(1), np.asarray(basis.eigenvalues[:1], dtype=float),
                   basis.trace_matrix(1, idx), t0, t1, idx)


@dataclass
class HUMDiagnostics:
    condition: float
    truncated: int
    cutoff: float
    predicted_cost: float
    eigenvalues: np.ndarray = field(repr=False)


def _mp_hum_coefficients(basis, gram, T, u0, dps0=30, dps_max=4096):
    # exact LU solve of G c = -d, doubling the precision until two solves agree
    prev = None
    dps = dps0
    while dps <= dps_max:
        with mp.workdps(dps):
            A = mp.mpf(duality_constant(basis.s))
            G = A * _mp_exp_gram(gram.eigenvalues, gram.eigenvalues, gram.traces, gram.traces, T)
            d = mp.matrix([mp.exp(-mp.mpf(float(l)) * T) * mp.mpf(float(u))
                           for l, u in zip(gram.eigenvalues, u0.u[:gram.J])])
            try:
                c = mp.lu_solve(G, -d)
            except ZeroDivisionError:
                c = None
            if c is not None and prev is not None:
                if mp.norm(c - prev) <= mp.mpf(10) ** -20 * mp.norm(c):
                    return np.array(list(c), dtype=object), dps
            prev = c
        dps *= 2
    raise ConvergenceError(f"multiprecision HUM solve not converged at {dps_max} digits")


def hum_solve(basis: SpectralBasis, J: int, T: float, u0: ModalHeatState,
              rcond: float = 1e-12, t0: float = 0.0, boundarySet="plus",
              refine: int = 3, precision: str = "double") -> tuple[ControlSignal, HUMDiagnostics]:
    """Minimal-norm control driving the first J modes of u₀ to zero at t₀ + T.

    With ``precision="double"`` (default), solves G c = -d by symmetric
    eigendecomposition, dropping directions whose eigenvalue is below ``rcond``
    times the largest (reported, never silent).  The float64 solution is
    refined against a long-double residual and the coefficients are kept in
    long double: with cond(G) up to 1e12 and ‖c‖ far above ‖u₀‖, float64
    rounding of c alone would leave residuals near 1e-8.

    ``precision="mp"`` solves the same system exactly by multiprecision LU,
    doubling the working precision until the solution is stable.  No
    direction is truncated; ``condition`` then is the float64 estimate only.
    """
    if T <= 0:
        raise ValueError("control horizon must be positive")
    if precision not in ("double", "mp"):
        raise ValueError(f"unknown precision {precision!r}")
    gram = heat_obs_gramian(basis, J, T, weighted=False, withConstant=True, boundarySet=boundarySet)
    lam = gram.eigenvalues
    if not np.any(gram.traces):
        raise UnobservableError("all boundary traces vanish; the Gramian is singular")
    w, Q = np.linalg.eigh(gram.G)
    cond = float(w[-1] / w[0]) if w[0] > 0 else math.inf
    if precision == "mp":
        c, dps = _mp_hum_coefficients(basis, gram, T, u0)
        sig = ControlSignal(coefficients=c, eigenvalues=lam.copy(), traces=gram.traces.copy(),
                            t0=float(t0), t1=float(t0 + T), points=gram.boundarySet, dps=dps,
                            horizon=float(T))
        return sig, HUMDiagnostics(condition=cond, truncated=0, cutoff=0.0,
                                   predicted_cost=sig.norm(), eigenvalues=w)
    cutoff = rcond * w[-1]
    keep = w > cutoff
    if not np.any(keep):
        raise UnobservableError("unobservable at this precision: every direction was truncated")
    if not np.all(keep):
        warnings.warn(f"HUM solve truncated {int(np.sum(~keep))} of {J} directions",
                      RuntimeWarning, stacklevel=2)
    Qk, wk = Q[:, keep], w[keep]
    ld = np.longdouble
    tr = np.asarray(gram.traces, dtype=ld)
    lam_ld = np.asarray(lam, dtype=ld)
    G_ld = (ld(duality_constant(basis.s)) * (tr @ tr.T)
            * _relax(lam_ld[:, None] + lam_ld[None, :], T, ld))
    d_ld = np.exp(-lam_ld * ld(T)) * np.asarray(u0.u[:J], dtype=ld)
    c = np.zeros(J, dtype=ld)
    r = d_ld
    for _ in range(refine + 1):
        # residual restricted to the retained subspace drives the correction
        c = c - np.asarray(Qk @ ((Qk.T @ np.asarray(r, dtype=float)) / wk), dtype=ld)
        r = G_ld @ c + d_ld
    sig = ControlSignal(coefficients=c, eigenvalues=lam.copy(), traces=gram.traces.copy(),
                        t0=float(t0), t1=float(t0 + T), points=gram.boundarySet, horizon=float(T))
    diag = HUMDiagnostics(condition=cond, truncated=int(np.sum(~keep)), cutoff=float(cutoff),
                          predicted_cost=sig.norm(), eigenvalues=w)
    return sig, diag


@dataclass
class ProjectionResiduals:
    max_residual: float
    relative: float
    controlled: np.ndarray
    spillover: np.ndarray


def verify_projection(basis: SpectralBasis, u0: ModalHeatState, f: ControlSignal | None,
                      J: int, T: float, M: int | None = None, t0: float = 0.0) -> ProjectionResiduals:
    """Propagate with the control and report max_{j≤J} |u_j(T)| and the spillover above J."""
    M = max(J, u0.M if M is None else int(M))
    if u0.M < M:
        u0 = ModalHeatState(np.r_[u0.u, np.zeros(M - u0.M)], u0.time)
    uT = propagate_controlled(basis, u0, f, t0, t0 + T, M)
    low = uT.u[:J]
    res = float(np.max(np.abs(low)))
    nrm = u0.norm
    return ProjectionResiduals(max_residual=res, relative=res / nrm if nrm > 0 else 0.0,
                               controlled=low, spillover=uT.u[J:M])


def minimal_norm_check(basis: SpectralBasis, f: ControlSignal, count: int = 20,
                       seed: int = 0) -> dict:
    """Compare ‖f‖ with ‖f + g‖ for random g that leave the J controlled modes unchanged.

    Perturbations live in a richer exponential family (extra decay rates) and are
    projected onto the null space of the control-to-state map of the first J
    modes, so f + g is also a null control of those modes.
    """
    rng = np.random.default_rng(seed)
    J = f.J
    T = f.t1 - f.t0
    lam_c = f.eigenvalues
    A = duality_constant(basis.s)
    rates = np.r_[lam_c, lam_c[-1] * (1.5 + np.arange(2 * J))]
    P = f.traces.shape[1]
    # response of mode j to unit coefficient of (rate k, point p): 𝒜 t_j(p) ∫ e^{-r_k(T-t)} e^{-λ_j(T-t)}
    I = _relax(rates[:, None] + lam_c[None, :], T)  # (K, J)
    blocks = []
    for p in range(P):
        blocks.append(A * f.traces[:, p][None, :] * I)  # (K, J)
    Mresp = np.vstack(blocks).T  # (J, K*P)
    # Gram of the family in L²
    Gfam = np.kron(np.eye(P), _relax(rates[:, None] + rates[None, :], T))
    # f in the family: coefficients on the first J rates, weighted by its traces
    fvec = np.zeros(rates.size * P)
    for p in range(P):
        fvec[p * rates.size:p * rates.size + J] = f.coefficients * f.traces[:, p]
    _, sv, Vt = np.linalg.svd(Mresp)
    rank = int(np.sum(sv > sv[0] * 1e-13))
    N = Vt[rank:].T
    base = float(fvec @ Gfam @ fvec)
    worst = math.inf
    ok = True
    for _ in range(count):
        g = N @ rng.standard_normal(N.shape[1])
        g *= 0.1 * math.sqrt(max(base, 1e-300) / max(float(g @ Gfam @ g), 1e-300))
        pert = float((fvec + g) @ Gfam @ (fvec + g))
        ratio = pert / base if base > 0 else math.inf
        worst = min(worst, ratio)
        ok &= pert >= base * (1 - 1e-10)
    return {"base_norm_sq": base, "min_ratio": worst, "ok": bool(ok), "nullspace_dim": int(N.shape[1])}


@dataclass
class CostCheck:
    J: int
    Tlist: np.ndarray
    cost_sq: np.ndarray
    decreasing: bool
    slope: float
    intercept: float
    r2: float


def cost_check(basis: SpectralBasis, Jlist, Tlist, u0: ModalHeatState,
               precision: str = "double") -> dict:
    """HUM cost ‖f‖² across horizons, fitted as log(‖f‖² T / ‖u₀‖²) = â/T + b per J.

    Short horizons push the Gramian past the rcond cutoff in double precision,
    which underestimates the cost; ``precision="mp"`` avoids the truncation.
    """
    Tlist = np.asarray(Tlist, dtype=float)
    out = {}
    nrm2 = u0.norm ** 2
    for J in Jlist:
        costs = np.array([hum_solve(basis, J, float(T), u0, precision=precision)[0].norm_sq()
                          for T in Tlist])
        y = np.log(costs * Tlist / nrm2)
        fit = stats.linregress(1 / Tlist, y)
        out[int(J)] = CostCheck(J=int(J), Tlist=Tlist, cost_sq=costs,
                                decreasing=bool(np.all(np.diff(costs) < 0)),
                                slope=float(fit.slope), intercept=float(fit.intercept),
                                r2=float(fit.rvalue ** 2))
    slopes = [out[int(J)].slope for J in Jlist]
    return {"per_J": out, "slopes": slopes,
            "slope_monotone": bool(np.all(np.diff(slopes) > 0))}


@dataclass(frozen=True)
class Stage:
    index: int
    start: float
    tau: float
    threshold: float

    @property
    def control_end(self) -> float:
        return self.start + self.tau

    @property
    def end(self) -> float:
        return self.start + 2 * self.tau


@dataclass(frozen=True)
class LRSchedule:
    stages: tuple[Stage, ...]
    T: float
    gamma_lr: float
    tail: float

    def active_modes(self, lam: np.ndarray, j: int) -> int:
        """|K_j|: number of eigenvalues at or below 2^{2j}."""
        return int(np.searchsorted(np.asarray(lam), self.stages[j].threshold, side="right"))


def lr_schedule(T: float, stageCount: int) -> LRSchedule:
    """Stages a₀ = 0, a_{j+1} = a_j + 2τ_j with τ_j = γLR 2^{-2j/3}.

    γLR = T(1 - 2^{-2/3})/2 makes the infinite schedule fill [0, T]; the part
    left after ``stageCount`` stages is a terminal free-decay tail.
    """
    if T <= 0 or stageCount < 1:
        raise ValueError("need T > 0 and stageCount >= 1")
    g = T * (1 - 2 ** (-2 / 3)) / 2
    stages = []
    a = 0.0
    for j in range(stageCount):
        tau = g * 2 ** (-2 * j / 3)
        stages.append(Stage(index=j, start=a, tau=tau, threshold=float(2 ** (2 * j))))
        a += 2 * tau
    return LRSchedule(stages=tuple(stages), T=float(T), gamma_lr=g, tail=T - a)


@dataclass
class StageRecord:
    index: int
    start: float
    tau: float
    threshold: float
    active: int
    cost: float
    norm_pre: float
    norm_mid: float
    norm_post: float
    projection_residual: float
    decay_factor: float
    skipped: bool
    note: str = ""

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class CostLedger:
    stages: list[StageRecord] = field(default_factory=list)
    norm_initial: float = 0.0
    norm_terminal: float = 0.0
    tail: float = 0.0
    early_termination: int | None = None

    @property
    def total_cost(self) -> float:
        return math.sqrt(sum(r.cost ** 2 for r in self.stages))

    @property
    def terminal_ratio(self) -> float:
        return self.norm_terminal / self.norm_initial if self.norm_initial > 0 else 0.0

    def to_dict(self) -> dict:
        return {"stages": [r.to_dict() for r in self.stages], "norm_initial": self.norm_initial,
                "norm_terminal": self.norm_terminal, "terminal_ratio": self.terminal_ratio,
                "total_cost": self.total_cost, "tail": self.tail,
                "early_termination": self.early_termination}


def lr_control(basis: SpectralBasis, u0: ModalHeatState, T: float, stageCount: int,
               M: int | None = None, rcond: float = 1e-12,
               precision: str = "double") -> tuple[list[ControlSignal], CostLedger]:
    """Frequency-wise control: per stage a HUM control of K_j, then free decay.

    Stage j controls the modes with λ ≤ 2^{2j} over [a_j, a_j + τ_j], then lets
    the full tracked state decay over [a_j + τ_j, a_{j+1}].  After the stages,
    the remaining tail of [0, T] is free decay.

    ``precision`` is passed to :func:`hum_solve`.  With "double", stage costs
    beyond the rcond cutoff are underestimates (truncated directions are noted
    in the ledger); "mp" gives the exact stage controls, which is what a cost
    trend needs when the stage Gramians are far beyond float64 conditioning.
    """
    M = u0.M if M is None else int(M)
    if M > basis.count:
        raise ValueError(f"tracked window M={M} exceeds the basis ({basis.count} modes)")
    lam = np.asarray(basis.eigenvalues[:M], dtype=float)
    sched = lr_schedule(T, stageCount)
    state = ModalHeatState(np.r_[u0.u[:M], np.zeros(max(0, M - u0.M))], 0.0)
    ledger = CostLedger(norm_initial=state.norm, tail=sched.tail)
    controls: list[ControlSignal] = []
    done = False
    for st in sched.stages:
        K = sched.active_modes(lam, st.index)
        pre = state.norm
        note = ""
        cost = 0.0
        resid = 0.0
        skipped = False
        if done or pre == 0.0:
            mid = evolve_heat(state, lam, st.tau)
            skipped = True
            note = "finite-dimensional early termination" if done else "zero state"
        elif K == 0:
            mid = evolve_heat(state, lam, st.tau)
            skipped = True
            note = "no eigenvalue below threshold; free decay substituted"
        else:
            K = min(K, M)
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    f, diag = hum_solve(basis, K, st.tau, state, rcond=rcond, t0=st.start,
                                       precision=precision)
            except Exception as exc:  # singular stage Gramian
                warnings.warn(f"stage {st.index} skipped: {exc}", RuntimeWarning, stacklevel=2)
                mid = evolve_heat(state, lam, st.tau)
                skipped = True
                note = f"stage Gramian singular ({exc}); free decay substituted"
            else:
                if diag.truncated:
                    note = f"{diag.truncated} Gramian directions truncated"
                mid = propagate_controlled(basis, state, f, st.start, st.control_end, M)
                controls.append(f)
                cost = f.norm()
                resid = float(np.max(np.abs(mid.u[:K])))
                if K >= M:
                    done = True
                    ledger.early_termination = st.index
        post = evolve_heat(mid, lam, st.tau)
        ledger.stages.append(StageRecord(index=st.index, start=st.start, tau=st.tau,
                                         threshold=st.threshold, active=int(K), cost=cost,
                                         norm_pre=pre, norm_mid=mid.norm, norm_post=post.norm,
                                         projection_residual=resid,
                                         decay_factor=post.norm / mid.norm if mid.norm > 0 else 0.0,
                                         skipped=skipped, note=note))
        state = post
    final = evolve_heat(state, lam, max(sched.tail, 0.0))
    ledger.norm_terminal = final.norm
    return controls, ledger


def compose_controls(controls: list[ControlSignal]):
    """Concatenated piecewise control as a callable t ↦ boundary values."""
    def f(t):
        out = 0.0
        for c in controls:
            if c.t0 <= t <= c.t1:
                out = out + c(t)
        return np.atleast_1d(out)
    return f


def propagate_schedule(basis: SpectralBasis, u0: ModalHeatState, controls: list[ControlSignal],
                       T: float, M: int) -> ModalHeatState:
    """Single transposition pass over [0, T] with every stage control superposed."""
    lam = np.asarray(basis.eigenvalues[:M])
    u = np.r_[u0.u[:M], np.zeros(max(0, M - u0.M))] * np.exp(-lam * T)
    A = duality_constant(basis.s)
    from .heat import control_response
    for c in controls:
        tr = basis.trace_matrix(M, c.points)
        u = u + A * control_response(c, lam, tr, 0.0, T)
    return ModalHeatState(u, T)
