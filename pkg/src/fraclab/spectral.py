"""Generalized eigenpairs, fractional boundary traces and eigenfunction growth."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.linalg as sla
from scipy.special import gamma, roots_jacobi, roots_legendre

from .operator import IntervalDomain, Mesh, OperatorPair

BASIS_SCHEMA = "fraclab.basis/1"


class EigenSolveError(RuntimeError):
    """Raised when the generalized eigensolve fails or misses its residual target."""


class TraceFitError(RuntimeError):
    """Raised when the boundary extrapolation is too ill-conditioned to trust."""


@dataclass(frozen=True)
class TraceSet:
    """Fractional traces (φ_j/ρ^s) at the two endpoints.

    ``values`` and ``residuals`` have shape (M, 2), column 0 the left endpoint.
    ``weights`` holds x·ν for each endpoint.
    """

    values: np.ndarray
    residuals: np.ndarray
    weights: np.ndarray
    points: np.ndarray
    method: str
    K: int

    def at(self, which) -> np.ndarray:
        return self.values[:, list(which)]


@dataclass(frozen=True)
class SpectralBasis:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray = field(repr=False)
    s: float
    domain: IntervalDomain
    mesh: Mesh
    traces: TraceSet | None = None

    @property
    def count(self) -> int:
        return self.eigenvalues.size

    def with_traces(self, traces: TraceSet) -> "SpectralBasis":
        return replace(self, traces=traces)

    def trace_matrix(self, J: int, which="plus") -> np.ndarray:
        """Traces of the first J modes at the chosen endpoints, shape (J, P)."""
        if self.traces is None:
            raise ValueError("basis has no traces; call boundary_traces first")
        idx = self.domain.boundary_indices(which)
        return self.traces.values[:J, list(idx)]

    def boundary_weights(self, which="plus") -> np.ndarray:
        idx = self.domain.boundary_indices(which)
        return self.domain.weights[list(idx)]


def solve_eigens(op: OperatorPair, M: int, tol: float = 1e-9) -> SpectralBasis:
    """First M eigenpairs of A φ = λ B φ, mass-orthonormal and ascending."""
    n = op.mesh.n
    if not 1 <= M <= n:
        raise ValueError(f"need 1 <= M <= n={n}, got M={M}")
    A, B = op.stiffness, op.mass
    try:
        lam, V = sla.eigh(A, B, subset_by_index=[0, M - 1])
    except (sla.LinAlgError, ValueError) as exc:
        raise EigenSolveError(f"generalized eigensolve failed for n={n}, M={M}: {exc}") from exc

    # eigh fixes the sign only up to LAPACK's convention; pin it so exports are stable.
    flip = np.sign(V[np.argmax(np.abs(V), axis=0), np.arange(M)])
    V = V * flip
    res = np.linalg.norm(A @ V - (B @ V) * lam, axis=0)
    bound = tol * lam * np.linalg.norm(V, axis=0)
    if np.any(lam <= 0) or np.any(res > bound):
        worst = int(np.argmax(res / bound))
        raise EigenSolveError(
            f"eigenpair residual check failed: mode {worst + 1} residual {res[worst]:.3e} "
            f"vs bound {bound[worst]:.3e}, λ_min={lam.min():.3e}")
    gram = V.T @ B @ V
    if np.max(np.abs(gram - np.eye(M))) > 1e-10:
        raise EigenSolveError("eigenvectors are not mass-orthonormal to 1e-10")
    V.setflags(write=False)
    lam.setflags(write=False)
    return SpectralBasis(eigenvalues=lam, eigenvectors=V, s=op.s, domain=op.domain, mesh=op.mesh)


def green_trace(phi: np.ndarray, basis: SpectralBasis, lam: float, side: int) -> float:
    """Trace of one eigenfunction through its Poisson-kernel representation.

    On (-1, 1) the Green function of (-Δ)^s gives

        (φ/ρ^s)(1) = λ / (s 2^s Γ(s)²) ∫ φ(y) (1+y)^s (1-y)^{s-1} dy,

    which only needs φ in an integrated sense.  A general interval is mapped to
    (-1, 1); the eigenvalue scales by ℓ^{2s} and the trace by ℓ^{-s}, ℓ the
    half-length.  The P1 reconstruction is integrated with Gauss-Legendre on
    interior cells and Gauss-Jacobi on the cell touching the endpoint.
    """
    s = basis.s
    dom = basis.domain
    ell = dom.length / 2
    centre = (dom.left + dom.right) / 2
    y = np.r_[-1.0, (basis.mesh.nodes - centre) / ell, 1.0]
    v = np.r_[0.0, phi, 0.0]
    if side == 0:
        y = -y[::-1]
        v = v[::-1]
    lam_ref = lam * ell ** (2 * s)

    gx, gw = roots_legendre(10)
    a, b = y[:-2], y[1:-1]
    va, vb = v[:-2], v[1:-1]
    mid, hw = (a + b) / 2, (b - a) / 2
    pts = mid[:, None] + hw[:, None] * gx
    vals = va[:, None] + (vb - va)[:, None] * (pts - a[:, None]) / (b - a)[:, None]
    total = np.sum(hw[:, None] * gw * vals * (1 + pts) ** s * (1 - pts) ** (s - 1))

    jx, jw = roots_jacobi(10, s - 1, 0)
    a_last = y[-2]
    width = 1 - a_last
    pts = a_last + width * (jx + 1) / 2
    vals = v[-2] * (1 - pts) / width
    total += np.sum(jw * (width / 2) ** s * vals * (1 + pts) ** s)
    return lam_ref * total / (s * 2 ** s * gamma(s) ** 2) * ell ** (-s)


def fit_trace(phi: np.ndarray, basis: SpectralBasis, side: int, K: int = 4,
              max_cond: float = 1e8) -> tuple[float, float]:
    """Least-squares extrapolation φ(x_i) ≈ t ρ_i^s (1 + c ρ_i) on the K nodes nearest the endpoint.

    Returns the trace and the relative residual of the fit.
    """
    s = basis.s
    nodes = basis.mesh.nodes
    if K < 3 or K > nodes.size:
        raise ValueError(f"trace fit needs 3 <= K <= n, got K={K}")
    if side == 1:
        rho = basis.domain.right - nodes[::-1][:K]
        y = phi[::-1][:K]
    else:
        rho = nodes[:K] - basis.domain.left
        y = phi[:K]
    X = np.c_[rho ** s, rho ** (s + 1)]
    cond = np.linalg.cond(X)
    if cond > max_cond:
        raise TraceFitError(f"trace fit condition number {cond:.2e} > {max_cond:.0e}; refine the mesh")
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    r = y - X @ coef
    scale = np.linalg.norm(y)
    return float(coef[0]), float(np.linalg.norm(r) / scale) if scale > 0 else 0.0


def boundary_traces(basis: SpectralBasis, K: int = 4, method: str = "green",
                    residual_threshold: float = 0.25) -> TraceSet:
    """Fractional traces φ_j/ρ^s at both endpoints for every mode of ``basis``.

    Parameters
    ----------
    K : int
        Nodes used by the least-squares fit (also computed as a cross-check
        under ``method="green"``).
    method : {"green", "fit"}
        ``"green"`` integrates φ_j against the Poisson kernel of the interval;
        ``"fit"`` extrapolates nodal values with the model t ρ^s (1 + cρ).
    residual_threshold : float
        Upper bound on the reported residual.  For ``"fit"`` the residual is the
        relative least-squares misfit; for ``"green"`` it is the relative gap to
        the local fit, which flags badly resolved modes.
    """
    if method not in ("green", "fit"):
        raise ValueError(f"unknown trace method {method!r}")
    M = basis.count
    vals = np.empty((M, 2))
    res = np.empty((M, 2))
    for j in range(M):
        phi = basis.eigenvectors[:, j]
        for side in (0, 1):
            t_fit, r_fit = fit_trace(phi, basis, side, K)
            if method == "fit":
                vals[j, side], res[j, side] = t_fit, r_fit
            else:
                t = green_trace(phi, basis, basis.eigenvalues[j], side)
                vals[j, side] = t
                res[j, side] = abs(t - t_fit) / max(abs(t), 1e-300)
    bad = res > residual_threshold
    if np.any(bad):
        j, side = np.argwhere(bad)[0]
        warnings.warn(f"trace residual {res[j, side]:.2e} above {residual_threshold} "
                      f"for mode {j + 1} at endpoint {side}; consider refining the mesh",
                      RuntimeWarning, stacklevel=2)
    for arr in (vals, res):
        arr.setflags(write=False)
    return TraceSet(values=vals, residuals=res, weights=basis.domain.weights.copy(),
                    points=basis.domain.points.copy(), method=method, K=K)


def compute_basis(op: OperatorPair, M: int, K: int = 4, method: str = "green") -> SpectralBasis:
    """Eigensolve followed by trace extraction."""
    basis = solve_eigens(op, M)
    return basis.with_traces(boundary_traces(basis, K=K, method=method))


def weyl_fit(eigenvalues: np.ndarray, jmin: int = 10, jmax: int = 40) -> dict:
    """Least-squares slope of log λ_j against log j over jmin..jmax."""
    j = np.arange(jmin, min(jmax, eigenvalues.size) + 1)
    lam = np.asarray(eigenvalues)[j - 1]
    slope, icpt = np.polyfit(np.log(j), np.log(lam), 1)
    return {"slope": float(slope), "intercept": float(icpt), "jmin": int(j[0]), "jmax": int(j[-1])}


def _nodal_gradient(V: np.ndarray, h: float) -> np.ndarray:
    # Central differences inside, one-sided at the first and last interior node.
    return np.gradient(V, h, axis=0, edge_order=1)


def regularity_diagnostics(basis: SpectralBasis, op: OperatorPair | None = None,
                           mesh: Mesh | None = None, slack: float = 0.15) -> dict:
    """Growth exponents of eigenfunction norms against λ_j.

    Fits log-log slopes of ∫|∇φ_j|² / λ_j, ‖φ_j‖_∞ and ‖∇φ_j‖_{L¹} against λ_j and
    compares them with the bounds 2(1-s), N/4s and N/4s + 1.  Warnings only.
    """
    mesh = mesh or basis.mesh
    M = basis.count
    if M < 20:
        raise ValueError(f"regularity diagnostics need M >= 20 modes, got {M}")
    lam = np.asarray(basis.eigenvalues)
    V = np.asarray(basis.eigenvectors)
    s = basis.s
    grad = _nodal_gradient(V, mesh.h)
    grad_l2 = np.sum(grad ** 2, axis=0) * mesh.h
    energy = lam
    if op is not None:
        energy = np.einsum("ij,ik,kj->j", V, op.stiffness, V)
    sup = np.max(np.abs(V), axis=0)
    grad_l1 = np.sum(np.abs(grad), axis=0) * mesh.h

    loglam = np.log(lam)
    quantities = {
        "gradient_l2_ratio": (grad_l2 / energy, 2 * (1 - s)),
        "sup_norm": (sup, 1 / (4 * s)),
        "gradient_l1": (grad_l1, 1 / (4 * s) + 1),
    }
    report = {"s": s, "M": M, "slack": slack, "exponents": {}, "warnings": []}
    for name, (q, bound) in quantities.items():
        slope = float(np.polyfit(loglam, np.log(q), 1)[0])
        ok = slope <= bound + slack
        report["exponents"][name] = {"slope": slope, "bound": bound, "ok": bool(ok)}
        if not ok:
            msg = f"{name}: fitted slope {slope:.3f} exceeds bound {bound:.3f} + {slack}"
            report["warnings"].append(msg)
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return report


def export_basis(basis: SpectralBasis, path: str | Path) -> Path:
    """Write the basis as versioned JSON: eigenvalues, nodal values, traces, meta.

    Floats are written with ``repr`` precision so the round trip is exact.
    """
    path = Path(path)
    doc = {
        "schema": BASIS_SCHEMA,
        "meta": {"s": basis.s, "a": basis.domain.left, "b": basis.domain.right,
                 "n": basis.mesh.n, "h": basis.mesh.h, "count": basis.count},
        "eigenvalues": [float(x) for x in basis.eigenvalues],
        "eigenvectors": np.asarray(basis.eigenvectors).T.tolist(),
    }
    if basis.traces is not None:
        tr = basis.traces
        doc["traces"] = {"values": tr.values.tolist(), "residuals": tr.residuals.tolist(),
                         "weights": tr.weights.tolist(), "points": tr.points.tolist(),
                         "method": tr.method, "K": tr.K}
    path.write_text(json.dumps(doc))
    return path


def import_basis(path: str | Path) -> SpectralBasis:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != BASIS_SCHEMA:
        raise ValueError(f"unsupported basis schema {doc.get('schema')!r}")
    meta = doc["meta"]
    domain = IntervalDomain(meta["a"], meta["b"])
    mesh = Mesh.uniform(domain, meta["n"])
    basis = SpectralBasis(eigenvalues=np.array(doc["eigenvalues"]),
                          eigenvectors=np.array(doc["eigenvectors"]).T.copy(),
                          s=meta["s"], domain=domain, mesh=mesh)
    if "traces" in doc:
        t = doc["traces"]
        basis = basis.with_traces(TraceSet(values=np.array(t["values"]),
                                           residuals=np.array(t["residuals"]),
                                           weights=np.array(t["weights"]),
                                           points=np.array(t["points"]),
                                           method=t["method"], K=int(t["K"])))
    return basis


def exact_trace_magnitude(lam: np.ndarray, s: float, domain: IntervalDomain) -> np.ndarray:
    """|t_j| implied by the Pohozaev identity for a single eigenfunction.

    Σ_x (x·ν) t_j(x)² = 2sλ_j / Γ(1+s)².  This pins |t_j| whenever only one
    endpoint carries weight, or when the interval is symmetric about 0 and both
    traces share the same magnitude.
    """
    w = domain.weights
    if abs(domain.left + domain.right) < 1e-14:
        total = w.sum()
    elif np.count_nonzero(w) == 1:
        total = w[w != 0][0]
    else:
        raise ValueError("trace magnitude is not determined by the identity on this interval")
    return np.sqrt(2 * s * np.asarray(lam) / (total * gamma(1 + s) ** 2))
