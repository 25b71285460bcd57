"""Smallest eigenvalues of Gram matrices whose spectrum spans many decades.

Observability Gramians restricted to J modes are famously ill-conditioned: the
smallest eigenvalue can sit far below float64 resolution relative to the
largest.  The routines here try float64 first and fall back to rebuilding the
matrix in mpmath at increasing precision until the eigenvalue is resolved.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import mpmath as mp
import numpy as np


@dataclass(frozen=True)
class EigResult:
    value: float
    precision: str  # "float64", "mp<dps>" or "unresolved"
    ratio: float  # smallest / largest eigenvalue


def smallest_eigenvalue(matrix: np.ndarray, build_mp: Callable[[], "mp.matrix"] | None = None,
                        rel_floor: float = 1e-9, dps0: int = 40, dps_max: int = 1280,
                        guard: int = 12) -> EigResult:
    """Smallest eigenvalue of a symmetric PSD matrix, escalating precision if needed.

    Parameters
    ----------
    matrix : ndarray
        Float64 version of the matrix.
    build_mp : callable, optional
        Rebuilds the matrix entries in the current mpmath precision.  Without it
        only the float64 value is available.
    rel_floor : float
        Float64 results with λ_min / λ_max above this are accepted as is.
    guard : int
        Digits kept in reserve; an mp result is trusted when
        λ_min > 10^{-(dps - guard)} λ_max.
    """
    ev = np.linalg.eigvalsh(matrix)
    top = ev[-1]
    if top <= 0:
        return EigResult(0.0, "float64", 0.0)
    if ev[0] > rel_floor * top or build_mp is None:
        return EigResult(float(ev[0]), "float64", float(ev[0] / top))
    dps = dps0
    while dps <= dps_max:
        with mp.workdps(dps):
            A = build_mp()
            vals = mp.eigsy(A, eigvals_only=True)
            vals = sorted(vals)
            lo, hi = vals[0], vals[-1]
            if lo > mp.mpf(10) ** (-(dps - guard)) * hi:
                return EigResult(float(lo), f"mp{dps}", float(lo / hi))
        dps *= 2
    return EigResult(0.0, "unresolved", 0.0)


def to_mp_vector(x) -> list:
    return [mp.mpf(float(v)) for v in np.ravel(x)]
