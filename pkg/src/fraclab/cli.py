"""Configuration-driven experiment runner.

Subcommands
-----------
``fraclab run <config>``
    Validate a JSON experiment config, execute its pipeline and write CSV/JSON
    artifacts, ``summary.json``/``summary.txt`` and ``manifest.json`` into the
    output directory.
``fraclab report <dir>...``
    Aggregate finished run directories into one report with a pass/fail row per
    acceptance criterion.
``fraclab validate <config>``
    Schema check only.

Exit status is 0 when every acceptance-tagged check passes, 1 when one fails,
2 on configuration or missing-input errors and 3 when a pipeline raises.
The only environment variable read is ``FRACLAB_THREADS``, a cap on BLAS threads.
"""
from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import json
import math
import os
import sys
import warnings
from pathlib import Path
from typing import Annotated, Any, Literal, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

SCHEMA_VERSION = 1
THREADS_ENV = "FRACLAB_THREADS"

# Acceptance tolerances are fixed here, not configurable.
ORACLE_TOL = 0.02
WEYL_TOL = 0.1
ENERGY_TOL = 1e-12
EQUIPARTITION_TOL = 1e-9
POHOZAEV_TOL = 5e-2
GAMMA_TOL = 0.15
KERNEL_ID_TOL = 1e-12
PDE_TAIL_TOL = 1e-10
ODE_TOL = 1e-6
PROJECTION_TOL = 1e-8
DUALITY_TOL = 1e-9
COST_R2 = 0.9
HEAT_R2 = 0.95
LR_TERMINAL = 1e-6
RSS_TOL = 1e-12


class ConfigError(ValueError):
    pass


class MissingInputs(FileNotFoundError):
    def __init__(self, missing: list[str]):
        self.missing = missing
        super().__init__("missing inputs: " + ", ".join(missing))


# ----------------------------------------------------------------------------
# config schema


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class Grid(_Strict):
    """Grid given as endpoints and a count; ``spacing`` is "log" or "linear"."""

    start: float = Field(gt=0)
    stop: float = Field(gt=0)
    num: int = Field(ge=2, le=400)
    spacing: Literal["log", "linear"] = "log"

    @model_validator(mode="after")
    def _order(self):
        if not self.stop > self.start:
            raise ValueError("stop must exceed start")
        return self

    def values(self) -> np.ndarray:
        if self.spacing == "log":
            return np.logspace(math.log10(self.start), math.log10(self.stop), self.num)
        return np.linspace(self.start, self.stop, self.num)


GridLike = Union[Grid, list[Annotated[float, Field(gt=0)]]]


def _grid(g: GridLike) -> np.ndarray:
    return g.values() if isinstance(g, Grid) else np.asarray(g, dtype=float)


class _Common(_Strict):
    s: float = Field(gt=0, lt=1)
    n: int = Field(1024, ge=8, le=8192)
    domain: tuple[float, float] = (0.0, 1.0)

    @field_validator("domain")
    @classmethod
    def _domain(cls, v):
        if not v[1] > v[0]:
            raise ValueError("domain must be (left, right) with left < right")
        return v


class AssembleParams(_Strict):
    s: float = Field(gt=0, lt=1)
    n: int = Field(1024, ge=32, le=8192)
    levels: int = Field(3, ge=2, le=6)
    points: int = Field(10, ge=1, le=100)
    oracle_tol: float = Field(1e-9, gt=0, lt=1e-4)


class SpectrumParams(_Common):
    M: int = Field(40, ge=2)
    jmin: int = Field(10, ge=1)
    jmax: int = Field(40, ge=2)
    K: int = Field(4, ge=2, le=12)
    trace_method: Literal["green", "fit"] = "green"

    @model_validator(mode="after")
    def _ranges(self):
        if self.M > self.n:
            raise ValueError(f"M={self.M} exceeds the mesh size n={self.n}")
        if not self.jmin < self.jmax <= self.M:
            raise ValueError("need jmin < jmax <= M")
        return self


class PohozaevParams(_Strict):
    domain: tuple[float, float] = (-1.0, 1.0)
    J: list[Annotated[int, Field(ge=1)]] = [1, 2, 4]
    T: float = Field(4.0, gt=0)
    levels: int = Field(4, ge=2, le=6)
    seed: int = 0


class WaveParams(_Common):
    J: list[Annotated[int, Field(ge=1)]] = [2, 4, 8, 16]
    Tgrid: GridLike = Grid(start=0.1, stop=20.0, num=25)
    eps0: float = Field(1e-3, gt=0, lt=1)
    weighted: bool = True
    boundarySet: Literal["plus", "minus", "all"] = "plus"
    identity_samples: int = Field(50, ge=1)
    seed: int = 0
    pohozaev: PohozaevParams = PohozaevParams()

    @model_validator(mode="after")
    def _ranges(self):
        if max(self.J) > self.n:
            raise ValueError("largest J exceeds the mesh size")
        if list(self.J) != sorted(set(self.J)):
            raise ValueError("J must be strictly increasing")
        return self


class HeatParams(_Common):
    J: int = Field(8, ge=1)
    Tgrid: GridLike = Grid(start=0.05, stop=0.5, num=15)
    weighted: bool = True
    boundarySet: Literal["plus", "minus", "all"] = "plus"


class KernelParams(_Strict):
    T: float = Field(2.0, gt=0)
    L: float = Field(1.0, gt=0)
    beta: float = Field(3.0, gt=0)
    mser: int = Field(24, ge=4, le=400)
    grid: int = Field(20, ge=2, le=200)
    deltas: list[Annotated[float, Field(gt=0, lt=1)]] = [0.5, 0.7, 0.9]
    zeta_fraction: float = Field(0.5, gt=0, le=1)

    @model_validator(mode="after")
    def _beta(self):
        if not self.beta > 2 * self.L ** 2:
            raise ValueError(f"beta must exceed 2L^2 = {2 * self.L ** 2}")
        return self


class SolutionParams(_Strict):
    lambda_max: float = Field(1e3, gt=0)
    nzeta: int = Field(11, ge=3, le=101)


class ChainParams(_Strict):
    J: int = Field(4, ge=1)
    T: float = Field(1.0, gt=0)
    T0: float = Field(2.2, gt=0)
    L: float | None = Field(None, gt=0)
    betas: list[Annotated[float, Field(gt=2)]] = [2.1, 3.0, 5.0]
    count: int = Field(10, ge=1)
    seed: int = 0
    mser: int = Field(48, ge=4, le=400)


class TransmuteParams(_Common):
    M: int = Field(64, ge=1)
    kernel: KernelParams = KernelParams()
    solution: SolutionParams = SolutionParams()
    chain: ChainParams = ChainParams()


class HumParams(_Common):
    M: int = Field(16, ge=1)
    J: list[Annotated[int, Field(ge=1)]] = [2, 4, 8]
    T: list[Annotated[float, Field(gt=0)]] = [0.25, 1.0, 4.0]
    modes: int = Field(16, ge=1)
    seed: int = 0
    perturbations: int = Field(20, ge=1)
    fit_J: int = Field(8, ge=1)
    fit_T: GridLike = Grid(start=0.25, stop=2.5, num=9)
    fit_T_units: Literal["absolute", "relaxation"] = "relaxation"
    rcond: float = Field(1e-12, gt=0, lt=1)
    precision: Literal["double", "mp"] = "double"
    sample_dt: float | None = Field(None, gt=0)

    @model_validator(mode="after")
    def _ranges(self):
        if self.modes > self.M:
            raise ValueError("initial data has more modes than the basis tracks")
        if max(self.J + [self.fit_J]) > self.M:
            raise ValueError("J exceeds the tracked modes M")
        return self


class LRParams(_Common):
    M: int = Field(64, ge=1)
    T: float = Field(1.0, gt=0)
    stages: int = Field(5, ge=1, le=30)
    seed: int = 3
    precision: Literal["double", "mp"] = "double"
    expect: Literal["decay", "cost-growth"] = "decay"
    sample_dt: float | None = Field(None, gt=0)


class FormatFlags(_Strict):
    samples: bool = True
    operator_cache: bool = False


PARAMS = {"assemble": AssembleParams, "spectrum": SpectrumParams, "wave-obs": WaveParams,
          "heat-obs": HeatParams, "transmute": TransmuteParams, "hum": HumParams, "lr": LRParams}


class ExperimentConfig(_Strict):
    schema_version: Literal[1]
    kind: Literal["assemble", "spectrum", "wave-obs", "heat-obs", "transmute", "hum", "lr",
                  "full-report"]
    name: str | None = None
    output: str
    params: dict[str, Any] = {}
    configs: list[Union[str, dict[str, Any]]] = []
    format: FormatFlags = FormatFlags()

    @model_validator(mode="after")
    def _kind(self):
        if self.kind == "full-report":
            if self.params:
                raise ValueError("full-report takes no params")
            if not self.configs:
                raise ValueError("full-report needs at least one entry in configs")
        else:
            if self.configs:
                raise ValueError(f"configs is only valid for full-report, not {self.kind}")
        return self

    @property
    def typed_params(self):
        return PARAMS[self.kind].model_validate(self.params)

    def canonical(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


def _format_validation(exc: ValidationError, prefix: str = "") -> str:
    lines = []
    for e in exc.errors():
        loc = prefix + (".".join(str(x) for x in e["loc"]) or "<root>")
        lines.append(f"{loc}: {e['msg']}")
    return "; ".join(lines)


def load_config(path: str | Path) -> tuple[ExperimentConfig, Path]:
    path = Path(path)
    if not path.is_file():
        raise MissingInputs([str(path)])
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return parse_config(raw, path.parent), path.parent


def parse_config(raw: dict, base: Path | None = None) -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(_format_validation(exc)) from None
    if cfg.kind in PARAMS:
        try:
            PARAMS[cfg.kind].model_validate(cfg.params)
        except ValidationError as exc:
            raise ConfigError(_format_validation(exc, "params.")) from None
    for i, sub in enumerate(cfg.configs):
        if isinstance(sub, str):
            p = Path(sub) if base is None else base / sub
            try:
                load_config(p)
            except ConfigError as exc:
                raise ConfigError(f"configs[{i}]: {exc}") from None
        else:
            try:
                parse_config(sub, base)
            except ConfigError as exc:
                raise ConfigError(f"configs[{i}]: {exc}") from None
    return cfg


# ----------------------------------------------------------------------------
# artifact helpers


def _num(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return "" if x is None else str(x)


def write_csv(path: Path, header: list[str], rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_num(v) for v in r])
    return path


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else repr(x)
    return x


def write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")
    return path


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class Checks:
    """Ordered list of named checks; ``criterion`` marks acceptance-tagged rows."""

    def __init__(self):
        self.rows: list[dict] = []

    def add(self, name: str, passed: bool, value=None, threshold=None, criterion: int | None = None,
            detail: str = ""):
        self.rows.append({"name": name, "criterion": criterion, "passed": bool(passed),
                          "value": value, "threshold": threshold, "detail": detail})

    @property
    def failed(self) -> list[dict]:
        return [r for r in self.rows if r["criterion"] is not None and not r["passed"]]


# ----------------------------------------------------------------------------
# pipelines; each writes into ``out`` and returns a dict of reported quantities


def _basis(p, M: int):
    from .operator import build_operator
    from .spectral import compute_basis
    op = build_operator(p.s, p.n, *p.domain)
    return op, compute_basis(op, M)


def run_assemble(p: AssembleParams, out: Path, checks: Checks, fmt: FormatFlags) -> dict:
    from .operator import build_operator, export_operator, interpolate, pointwise_fraclap
    s = p.s
    xs = np.linspace(-0.9, 0.9, p.points)

    def u(z):
        return np.maximum(1 - np.asarray(z) ** 2, 0.0) ** s

    oracle = np.array([pointwise_fraclap(u, float(x), s, tol=p.oracle_tol) for x in xs])
    sizes = [p.n // 2 ** k for k in range(p.levels - 1, -1, -1)]
    rows, errs = [], []
    op = None
    for n in sizes:
        op = build_operator(s, n, -1.0, 1.0)
        disc = np.interp(xs, op.mesh.nodes, op.apply(interpolate(op, u)))
        rel = np.abs(disc - oracle) / np.abs(oracle)
        errs.append(float(rel.max()))
        rows += [(s, n, x, d, o, r) for x, d, o, r in zip(xs, disc, oracle, rel)]
    write_csv(out / "oracle_check.csv", ["s", "n", "x", "discrete", "oracle", "rel_error"], rows)
    if fmt.operator_cache:
        export_operator(op, out / "operator.npz")
    checks.add("oracle_match", errs[-1] <= ORACLE_TOL, errs[-1], ORACLE_TOL, 1,
               f"max relative error at n={sizes[-1]}")
    checks.add("oracle_refinement", bool(np.all(np.diff(errs) < 0)), errs, None, 1,
               "max relative error over refinements " + str(sizes))
    return {"sizes": sizes, "max_rel_error": errs}


def run_spectrum(p: SpectrumParams, out: Path, checks: Checks, fmt: FormatFlags) -> dict:
    from .operator import build_operator, export_operator
    from .spectral import compute_basis, weyl_fit
    op = build_operator(p.s, p.n, *p.domain)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RuntimeWarning)
        basis = compute_basis(op, p.M, K=p.K, method=p.trace_method)
    lam = basis.eigenvalues
    write_csv(out / "eigenvalues.csv", ["j", "lambda"], [(j + 1, v) for j, v in enumerate(lam)])
    tr = basis.traces
    write_csv(out / "traces.csv",
              ["j", "trace_left", "trace_right", "residual_left", "residual_right"],
              [(j + 1, *tr.values[j], *tr.residuals[j]) for j in range(basis.count)])
    fit = weyl_fit(lam, p.jmin, p.jmax)
    fit.update({"s": p.s, "n": p.n, "expected": 2 * p.s, "tolerance": WEYL_TOL,
                "trace_method": tr.method, "trace_warnings": [str(w.message) for w in caught]})
    write_json(out / "weyl_fit.json", fit)
    if fmt.operator_cache:
        export_operator(op, out / "operator.npz")
    err = abs(fit["slope"] - 2 * p.s)
    checks.add("weyl_exponent", err <= WEYL_TOL, fit["slope"], [2 * p.s - WEYL_TOL, 2 * p.s + WEYL_TOL],
               2, f"j in [{p.jmin}, {p.jmax}]")
    return {"weyl_slope": fit["slope"]}


def _wave_identities(p: WaveParams, basis, checks: Checks, out: Path) -> dict:
    from .operator import build_operator
    from .spectral import compute_basis
    from .wave import ModalWaveState, equipartition_residual, evolve_wave, pohozaev_residual, wave_energy
    rng = np.random.default_rng(p.seed)
    lam = basis.eigenvalues
    J = max(p.J)
    e_err, q_err = [], []
    for _ in range(p.identity_samples):
        st = ModalWaveState(*rng.standard_normal((2, J)))
        t = float(rng.uniform(0, 50))
        e0 = wave_energy(st, lam).total
        e1 = wave_energy(evolve_wave(st, lam, t), lam).total
        e_err.append(abs(e1 - e0) / e0)
        q_err.append(equipartition_residual(st, lam, float(rng.uniform(0.1, 20))))
    checks.add("energy_conservation", max(e_err) <= ENERGY_TOL, max(e_err), ENERGY_TOL, 3)
    checks.add("equipartition", max(q_err) <= EQUIPARTITION_TOL, max(q_err), EQUIPARTITION_TOL, 3)

    pz = p.pohozaev
    sizes = [p.n // 2 ** k for k in range(pz.levels - 1, -1, -1)]
    Jmax = max(pz.J)
    rows = []
    res = {J: [] for J in pz.J}
    for n in sizes:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            b = compute_basis(build_operator(p.s, n, *pz.domain), Jmax)
        for J in pz.J:
            st = ModalWaveState(*np.random.default_rng(pz.seed).standard_normal((2, J)))
            r = float(pohozaev_residual(b, st, pz.T))
            res[J].append(r)
            rows.append((p.s, n, J, pz.T, r))
    write_csv(out / "pohozaev.csv", ["s", "n", "J", "T", "residual"], rows)
    for J in pz.J:
        checks.add(f"pohozaev_J{J}", res[J][-1] <= POHOZAEV_TOL, res[J][-1], POHOZAEV_TOL, 3,
                   f"n={sizes[-1]}")
        checks.add(f"pohozaev_refinement_J{J}", bool(np.all(np.diff(res[J]) < 0)), res[J], None, 3,
                   "residual over n=" + str(sizes))
    return {"energy_max": max(e_err), "equipartition_max": max(q_err),
            "pohozaev": {str(J): v for J, v in res.items()}}


def run_wave(p: WaveParams, out: Path, checks: Checks, fmt: FormatFlags) -> dict:
    from .wave import estimate_T0, wave_obs_gramian
    Tgrid = _grid(p.Tgrid)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        _, basis = _basis(p, max(p.J))
    est = estimate_T0(basis, p.J, Tgrid, eps0=p.eps0, boundarySet=p.boundarySet, weighted=p.weighted)
    write_csv(out / "kappa.csv",
              ["s", "n", "J", "T", "weighted", "boundarySet", "kappa", "precision"],
              [(p.s, p.n, J, T, p.weighted, p.boundarySet, k, pr) for J, T, k, pr in est.rows()])
    write_csv(out / "t0.csv", ["s", "n", "J", "lambda_J", "T0emp", "eps0"],
              [(p.s, p.n, J, basis.eigenvalues[J - 1], est.T0[J], p.eps0) for J in p.J])
    gamma = {"s": p.s, "gamma_hat": est.gamma_hat, "gamma_ref": est.gamma_ref, "tolerance": GAMMA_TOL,
             "within_tolerance": (est.gamma_hat is not None and est.gamma_ref is not None
                                  and abs(est.gamma_hat - est.gamma_ref) <= GAMMA_TOL),
             "T0": {str(J): v for J, v in est.T0.items()}}
    write_json(out / "gamma.json", gamma)

    # Gramian positivity and growth in T, checked on the full matrices
    psd_worst, mono_worst = math.inf, math.inf
    for J in p.J:
        prev = None
        for T in Tgrid:
            G = wave_obs_gramian(basis, J, float(T), p.boundarySet, p.weighted).full
            scale = max(np.abs(G).max(), 1e-300)
            psd_worst = min(psd_worst, np.linalg.eigvalsh(G).min() / scale)
            if prev is not None:
                mono_worst = min(mono_worst, np.linalg.eigvalsh(G - prev).min() / scale)
            prev = G
    checks.add("gramian_psd", psd_worst >= -1e-10, psd_worst, -1e-10, 4,
               "min eigenvalue / max entry")
    checks.add("gramian_T_monotone", mono_worst >= -1e-10, mono_worst, -1e-10, 4,
               "min eigenvalue of G(T') - G(T) / max entry")
    kap = est.kappa
    checks.add("kappa_monotone_T", bool(np.all(np.diff(kap, axis=1) >= 0)), None, None, 4)
    checks.add("kappa_monotone_J", bool(np.all(np.diff(kap, axis=0) <= 0)), None, None, 4)
    t0 = [est.T0[J] for J in p.J]
    ok = all(v is not None for v in t0) and bool(np.all(np.diff(t0) >= 0))
    checks.add("T0_nondecreasing", ok, t0, None, 4)
    checks.add("gamma_exponent", gamma["within_tolerance"], est.gamma_hat,
               [None if est.gamma_ref is None else est.gamma_ref - GAMMA_TOL,
                None if est.gamma_ref is None else est.gamma_ref + GAMMA_TOL],
               None, "exploratory; the reference exponent is an upper estimate")
    info = {"gamma_hat": est.gamma_hat, "gamma_ref": est.gamma_ref, "T0": gamma["T0"]}
    info.update(_wave_identities(p, basis, checks, out))
    return info


def run_heat(p: HeatParams, out: Path, checks: Checks, fmt: FormatFlags) -> dict:
    from .heat import obs_constant_heat
    Tgrid = _grid(p.Tgrid)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        _, basis = _basis(p, p.J)
    r = obs_constant_heat(basis, p.J, Tgrid, weighted=p.weighted, boundarySet=p.boundarySet)
    write_csv(out / "kappa_heat.csv", ["s", "n", "J", "T", "kappa", "precision", "saturated"],
              [(p.s, p.n, p.J, T, k, pr, sat)
               for T, k, pr, sat in zip(r.Tgrid, r.kappa, r.precision, r.saturated)])
    fit = {"s": p.s, "J": p.J, "slope": r.slope, "intercept": r.intercept, "r2": r.r2,
           "Tmin": float(Tgrid.min()), "Tmax": float(Tgrid.max()), "r2_min": HEAT_R2}
    write_json(out / "blowup_fit.json", fit)
    checks.add("heat_blowup_fit", r.r2 >= HEAT_R2, r.r2, HEAT_R2, 7, "R^2 of log(1/kappa) vs 1/T")
    return {"slope": r.slope, "r2": r.r2}


def run_transmute(p: TransmuteParams, out: Path, checks: Checks, fmt: FormatFlags) -> dict:
    from .heat import ModalHeatState
    from .transmute import (KernelSpec, kernel_bound, kernel_eval, kernel_pde_residual, kernel_table,
                            transfer_demo, transmuted_solution)
    kp = p.kernel
    spec = KernelSpec(kp.T, kp.L, kp.beta, kp.mser)
    times = np.linspace(0, kp.T, kp.grid + 2)[1:-1]
    zetas = np.linspace(0, kp.L, kp.grid + 1)[1:]
    tab = kernel_table(spec, zetas, times)
    tab.to_csv(out / "kernel.csv")

    # k_ζ(0, t) = g(t): a difference quotient at tiny ζ against the closed form
    h = 1e-8
    idr = max(abs(kernel_eval(spec, h, float(t)).value / h - spec.g(float(t))) / spec.g(float(t))
              for t in times)
    checks.add("kernel_identity", idr <= KERNEL_ID_TOL, idr, KERNEL_ID_TOL, 5, "k_zeta(0,t) vs g(t)")

    Z, Tt = np.meshgrid(zetas, times, indexing="ij")
    brows, worst = [], 0.0
    for d in kp.deltas:
        bound = kernel_bound(spec, Z, Tt, d)
        ratio = (np.abs(tab.k) + tab.tail) / bound
        worst = max(worst, float(ratio.max()))
        brows += [(d, z, t, k, b) for z, t, k, b in zip(Z.ravel(), Tt.ravel(), tab.k.ravel(), bound.ravel())]
    write_csv(out / "kernel_bound.csv", ["delta", "zeta", "t", "k", "bound"], brows)
    checks.add("kernel_bound", worst <= 1.0, worst, 1.0, 5, "max (|k| + tail) / bound")
    checks.add("kernel_endpoint", tab.endpoint_check(), None, None, None)

    zr = kp.zeta_fraction * kp.L
    pde = kernel_pde_residual(spec, np.linspace(-zr, zr, 7), np.linspace(0.05 * kp.T, 0.95 * kp.T, 7))
    pde.update({"mser": kp.mser, "zeta_max": zr})
    write_json(out / "pde_residual.json", pde)
    checks.add("kernel_pde_tail", pde["analytic"] <= PDE_TAIL_TOL, pde["analytic"], PDE_TAIL_TOL, 5,
               f"Mser={kp.mser}, |zeta| <= {zr}")

    ch = p.chain
    M = max(p.M, ch.J)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        _, basis = _basis(p, M)
    lam = basis.eigenvalues
    J = int(np.searchsorted(lam, p.solution.lambda_max, side="right"))
    if J >= 1:
        sol = transmuted_solution(basis, ModalHeatState(np.ones(J)), spec,
                                  np.linspace(-zr, zr, p.solution.nzeta))
        write_csv(out / "transmuted.csv",
                  ["j", "lambda", "ode_residual", "velocity0", "velocity0_quad"],
                  [(j + 1, lam[j], sol.ode_residual[j], sol.velocity0[j], sol.velocity0_quad[j])
                   for j in range(J)])
        ode = float(sol.ode_residual.max())
        checks.add("transmuted_ode", ode <= ODE_TOL, ode, ODE_TOL, 5,
                   f"modes with lambda <= {p.solution.lambda_max:g}, Mser={kp.mser}")

    rep = transfer_demo(basis, ch.J, ch.T, ch.T0, L=ch.L, betas=ch.betas, count=ch.count, seed=ch.seed,
                        mser=ch.mser)
    write_json(out / "transfer.json", rep.to_dict())
    checks.add("transfer_chain", rep.all_hold, max(r.ratio for r in rep.records), 1.0, 5,
               "largest lhs/rhs over all inequalities")
    checks.add("chain_constants_monotone", rep.constants_monotone, None, None, None)
    return {"kernel_bound_ratio": worst, "pde_tail": pde["analytic"], "chain_all_hold": rep.all_hold}


def _export_control(f, stem: Path, with_samples: bool, dt_: float | None):
    write_json(stem.with_name(stem.name + ".json"), f.to_dict())
    if with_samples:
        ts, vals = f.samples(dt_)
        pts = list(f.points)
        write_csv(stem.with_name(stem.name + "_samples.csv"), ["t"] + [f"f_{q}" for q in pts],
                  [(t, *np.atleast_1d(v)) for t, v in zip(ts, vals)])


def run_hum(p: HumParams, out: Path, checks: Checks, fmt: FormatFlags) -> dict:
    from scipy.integrate import IntegrationWarning

    from .control import cost_check, hum_solve, minimal_norm_check, verify_projection
    from .heat import ModalHeatState, duality_residual
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        _, basis = _basis(p, p.M)
    rng = np.random.default_rng(p.seed)
    u0 = ModalHeatState(rng.standard_normal(p.modes))
    ctrl_dir = out / "controls"
    ctrl_dir.mkdir(exist_ok=True)
    rows = []
    worst_proj = worst_dual = 0.0
    minimal_ok = True
    decreasing = True
    warnings.filterwarnings("ignore", category=IntegrationWarning)
    for J in p.J:
        costs = []
        for T in p.T:
            f, diag = hum_solve(basis, J, T, u0, rcond=p.rcond, precision=p.precision)
            proj = verify_projection(basis, u0, f, J, T, p.M)
            vT = rng.standard_normal(J)
            dual = duality_residual(basis, u0, f, vT, T)
            mn = minimal_norm_check(basis, f, count=p.perturbations, seed=p.seed)
            costs.append(f.norm_sq())
            worst_proj = max(worst_proj, proj.relative)
            worst_dual = max(worst_dual, dual["relative"])
            minimal_ok &= mn["ok"]
            rows.append((p.s, p.n, J, T, costs[-1], proj.relative, dual["relative"], mn["ok"],
                         mn["min_ratio"], diag.condition, diag.truncated))
            _export_control(f, ctrl_dir / f"hum_J{J}_T{T:g}", fmt.samples, p.sample_dt)
        decreasing &= bool(np.all(np.diff(costs) < 0))
    write_csv(out / "hum.csv",
              ["s", "n", "J", "T", "cost_sq", "projection_residual", "duality_residual",
               "minimal_norm", "min_norm_ratio", "condition", "truncated"], rows)
    checks.add("hum_projection", worst_proj <= PROJECTION_TOL, worst_proj, PROJECTION_TOL, 6,
               "max_j<=J |u_j(T)| / |u0|")
    checks.add("hum_duality", worst_dual <= DUALITY_TOL, worst_dual, DUALITY_TOL, 6)
    checks.add("hum_minimal_norm", minimal_ok, None, None, 6, f"{p.perturbations} perturbations")
    checks.add("hum_cost_decreasing", decreasing, None, None, 6, "cost over T per J")

    Tfit = _grid(p.fit_T)
    if p.fit_T_units == "relaxation":
        # horizons in units of the slowest decay time 1/λ₁
        Tfit = Tfit / basis.eigenvalues[0]
    cc = cost_check(basis, [p.fit_J], Tfit, u0, precision=p.precision)["per_J"][p.fit_J]
    write_csv(out / "cost_fit.csv", ["s", "J", "T", "cost_sq"],
              [(p.s, p.fit_J, T, c) for T, c in zip(cc.Tlist, cc.cost_sq)])
    write_json(out / "cost_fit.json", {"s": p.s, "J": p.fit_J, "slope": cc.slope,
                                       "intercept": cc.intercept, "r2": cc.r2,
                                       "decreasing": cc.decreasing, "r2_min": COST_R2,
                                       "fit_T_units": p.fit_T_units, "lambda_1": basis.eigenvalues[0],
                                       "Tmin": float(Tfit.min()), "Tmax": float(Tfit.max())})
    checks.add("hum_cost_fit", cc.r2 >= COST_R2, cc.r2, COST_R2, 6,
               f"R^2 of log(|f|^2 T/|u0|^2) vs 1/T, J={p.fit_J}")
    checks.add("hum_cost_fit_decreasing", cc.decreasing, None, None, None, "cost over the fit window")
    return {"projection_max": worst_proj, "duality_max": worst_dual, "cost_r2": cc.r2}


def run_lr(p: LRParams, out: Path, checks: Checks, fmt: FormatFlags) -> dict:
    from .control import lr_control, lr_schedule
    from .heat import ModalHeatState
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        _, basis = _basis(p, p.M)
        u0 = ModalHeatState(np.random.default_rng(p.seed).standard_normal(p.M))
        controls, ledger = lr_control(basis, u0, p.T, p.stages, p.M, precision=p.precision)
    sched = lr_schedule(p.T, p.stages)
    write_json(out / "ledger.json", ledger.to_dict())
    write_csv(out / "stages.csv",
              ["index", "start", "tau", "threshold", "active", "cost", "norm_pre", "norm_mid",
               "norm_post", "projection_residual", "skipped", "note"],
              [(r.index, r.start, r.tau, r.threshold, r.active, r.cost, r.norm_pre, r.norm_mid,
                r.norm_post, r.projection_residual, r.skipped, r.note) for r in ledger.stages])
    ctrl_dir = out / "controls"
    ctrl_dir.mkdir(exist_ok=True)
    for i, f in enumerate(controls):
        _export_control(f, ctrl_dir / f"stage_{i}", fmt.samples, p.sample_dt)

    g_ref = p.T * (1 - 2 ** (-2 / 3)) / 2
    sched_ok = abs(sched.gamma_lr - g_ref) <= 1e-15 * g_ref and all(
        st.tau == sched.gamma_lr * 2 ** (-2 * st.index / 3) and st.threshold == 2.0 ** (2 * st.index)
        for st in sched.stages)
    checks.add("lr_schedule", sched_ok, sched.gamma_lr, g_ref, 8,
               "tau_j = gammaLR 2^(-2j/3), thresholds 2^(2j)")
    rss = math.sqrt(math.fsum(f.norm_sq() for f in controls))
    rel = abs(ledger.total_cost - rss) / rss if rss > 0 else abs(ledger.total_cost)
    checks.add("lr_cost_rss", math.isfinite(ledger.total_cost) and rel <= RSS_TOL, rel, RSS_TOL, 8)
    posts = [r.norm_post for r in ledger.stages]
    costs = [r.cost for r in ledger.stages if not r.skipped]
    if p.expect == "decay":
        checks.add("lr_norms_decreasing", bool(np.all(np.diff(posts) < 0)), posts, None, 8)
        checks.add("lr_terminal", ledger.terminal_ratio <= LR_TERMINAL, ledger.terminal_ratio,
                   LR_TERMINAL, 8, "|u(T)| / |u0|")
    else:
        grows = len(costs) >= 4 and bool(np.all(np.diff(costs) > 0))
        checks.add("lr_cost_growth", grows, costs, None, 8,
                   "per-stage cost increasing over >= 4 control stages")
        checks.add("lr_terminal", ledger.terminal_ratio <= LR_TERMINAL, ledger.terminal_ratio,
                   LR_TERMINAL, None, "reported only")
    return {"terminal_ratio": ledger.terminal_ratio, "total_cost": ledger.total_cost,
            "stage_costs": [r.cost for r in ledger.stages], "early_termination": ledger.early_termination}


PIPELINES = {"assemble": run_assemble, "spectrum": run_spectrum, "wave-obs": run_wave,
             "heat-obs": run_heat, "transmute": run_transmute, "hum": run_hum, "lr": run_lr}

# files each kind must leave behind (full-report checks these)
REQUIRED = {"assemble": ["oracle_check.csv"],
            "spectrum": ["eigenvalues.csv", "traces.csv", "weyl_fit.json"],
            "wave-obs": ["kappa.csv", "t0.csv", "gamma.json", "pohozaev.csv"],
            "heat-obs": ["kappa_heat.csv", "blowup_fit.json"],
            "transmute": ["kernel.csv", "kernel_bound.csv", "pde_residual.json", "transfer.json"],
            "hum": ["hum.csv", "cost_fit.csv", "cost_fit.json"],
            "lr": ["ledger.json", "stages.csv"]}
META = ("summary.json", "summary.txt", "manifest.json")


# ----------------------------------------------------------------------------
# run / report


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _code_version() -> str:
    from . import __version__
    from .operator import SCHEME_VERSION
    return f"{__version__}+{SCHEME_VERSION}"


def _threads():
    val = os.environ.get(THREADS_ENV)
    if not val:
        return None
    try:
        n = int(val)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {val!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {val!r}")
    return n


def _summary_text(kind: str, name: str, checks: Checks, info: dict) -> str:
    lines = [f"{kind}: {name}", ""]
    for r in checks.rows:
        tag = f"[{r['criterion']}]" if r["criterion"] is not None else "[info]"
        mark = "PASS" if r["passed"] else "FAIL"
        val = "" if r["value"] is None else f" value={_jsonable(r['value'])}"
        thr = "" if r["threshold"] is None else f" threshold={_jsonable(r['threshold'])}"
        det = f" ({r['detail']})" if r["detail"] else ""
        lines.append(f"{mark} {tag} {r['name']}{val}{thr}{det}")
    lines.append("")
    lines.append("status: " + ("ok" if not checks.failed else f"{len(checks.failed)} failing"))
    return "\n".join(lines) + "\n"


def run(cfg: ExperimentConfig, output: str | Path | None = None, base: Path | None = None) -> dict:
    """Execute one config and return its manifest dict.

    The exit status of the command line maps from ``manifest["status"]``.
    """
    out = Path(output if output is not None else cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    name = cfg.name or out.name
    if cfg.kind == "full-report":
        return _run_full(cfg, out, base, started)
    checks = Checks()
    params = cfg.typed_params
    threads = _threads()
    try:
        with warnings.catch_warnings():  # pipelines may adjust filters locally
            if threads is not None:
                from threadpoolctl import threadpool_info, threadpool_limits
                # OpenBLAS can crash when raised above its start-up thread count, so only cap
                start = min((p["num_threads"] for p in threadpool_info()), default=threads)
                with threadpool_limits(limits=min(threads, start)):
                    info = PIPELINES[cfg.kind](params, out, checks, cfg.format)
            else:
                info = PIPELINES[cfg.kind](params, out, checks, cfg.format)
    except (ConfigError, MissingInputs):
        raise
    except Exception as exc:
        mod = getattr(type(exc), "__module__", "")
        raise PipelineError(f"{cfg.kind} pipeline failed in {mod}: {exc}") from exc
    summary = {"kind": cfg.kind, "name": name, "params": params.model_dump(mode="json"),
               "checks": checks.rows, "info": info, "passed": not checks.failed}
    write_json(out / "summary.json", summary)
    (out / "summary.txt").write_text(_summary_text(cfg.kind, name, checks, info))
    return _manifest(cfg, out, started, "ok" if not checks.failed else "failed")


class PipelineError(RuntimeError):
    pass


def _manifest(cfg: ExperimentConfig, out: Path, started: str, status: str, extra=None) -> dict:
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    man = {"schema_version": SCHEMA_VERSION, "kind": cfg.kind, "name": cfg.name or out.name,
           "config_sha256": hashlib.sha256(cfg.canonical().encode()).hexdigest(),
           "code_version": _code_version(), "started": started, "finished": _now(),
           "status": status,
           "artifacts": [{"path": str(p.relative_to(out)), "sha256": sha256(p),
                          "bytes": p.stat().st_size} for p in files]}
    if extra:
        man.update(extra)
    write_json(out / "manifest.json", man)
    return man


def _run_full(cfg: ExperimentConfig, out: Path, base: Path | None, started: str) -> dict:
    dirs = []
    for i, sub in enumerate(cfg.configs):
        if isinstance(sub, str):
            sc, sbase = load_config((base or Path.cwd()) / sub)
        else:
            sc, sbase = parse_config(sub, base), base
        label = sc.name or f"{i:02d}-{sc.kind}"
        d = out / label
        run(sc, d, sbase)
        dirs.append(d)
    rep = full_report(dirs)
    write_json(out / "report.json", rep)
    (out / "report.txt").write_text(report_text(rep))
    return _manifest(cfg, out, started, "ok" if rep["passed"] else "failed",
                     {"runs": [str(d.relative_to(out)) for d in dirs]})


SECTIONS = {"assemble": "operator", "spectrum": "weyl", "wave-obs": "wave", "heat-obs": "heat_blowup",
            "transmute": "transmutation", "hum": "hum_cost", "lr": "lebeau_robbiano"}


def _section(kind: str, d: Path, summary: dict) -> dict:
    def load(name):
        return json.loads((d / name).read_text())

    sec = {"run": str(d), "params": summary["params"]}
    if kind == "spectrum":
        sec["weyl_fit"] = load("weyl_fit.json")
    elif kind == "wave-obs":
        sec["gamma"] = load("gamma.json")
    elif kind == "heat-obs":
        sec["blowup_fit"] = load("blowup_fit.json")
    elif kind == "transmute":
        t = load("transfer.json")
        sec["chain"] = {k: t[k] for k in ("all_hold", "constants_monotone", "final_constants",
                                          "max_tail_ratio")}
        sec["pde_residual"] = load("pde_residual.json")
    elif kind == "hum":
        sec["cost_fit"] = load("cost_fit.json")
    elif kind == "lr":
        led = load("ledger.json")
        sec["ledger"] = {k: led[k] for k in ("terminal_ratio", "total_cost", "early_termination")}
        sec["stage_costs"] = [r["cost"] for r in led["stages"]]
    elif kind == "assemble":
        sec["max_rel_error"] = summary["info"]["max_rel_error"]
    sec["checks"] = summary["checks"]
    return sec


def full_report(dirs) -> dict:
    """Aggregate finished run directories; raises MissingInputs listing every absent file."""
    dirs = [Path(d) for d in dirs]
    if not dirs:
        raise MissingInputs(["<no run directories given>"])
    missing, loaded = [], []
    for d in dirs:
        if not (d / "summary.json").is_file():
            missing += [str(d / m) for m in META if not (d / m).is_file()]
            continue
        summary = json.loads((d / "summary.json").read_text())
        kind = summary.get("kind")
        need = list(META) + REQUIRED.get(kind, [])
        missing += [str(d / m) for m in need if not (d / m).is_file()]
        loaded.append((kind, d, summary))
    if missing:
        raise MissingInputs(missing)
    sections: dict[str, list] = {}
    criteria: dict[int, dict] = {}
    for kind, d, summary in loaded:
        sections.setdefault(SECTIONS[kind], []).append(_section(kind, d, summary))
        for r in summary["checks"]:
            c = r["criterion"]
            if c is None:
                continue
            row = criteria.setdefault(c, {"criterion": c, "passed": True, "checks": []})
            row["checks"].append({"run": str(d), "name": r["name"], "passed": r["passed"]})
            row["passed"] &= r["passed"]
    rows = [criteria[c] for c in sorted(criteria)]
    return {"sections": sections, "criteria": rows, "passed": all(r["passed"] for r in rows)}


def report_text(rep: dict) -> str:
    lines = []
    for name, secs in rep["sections"].items():
        lines.append(f"== {name}")
        for sec in secs:
            lines.append(f"  run {sec['run']}")
            for r in sec["checks"]:
                tag = r["criterion"] if r["criterion"] is not None else "info"
                lines.append(f"    {'PASS' if r['passed'] else 'FAIL'} [{tag}] {r['name']}")
    lines.append("== acceptance")
    for r in rep["criteria"]:
        bad = [c["name"] for c in r["checks"] if not c["passed"]]
        lines.append(f"  criterion {r['criterion']}: {'PASS' if r['passed'] else 'FAIL'}"
                     + (f" (failing: {', '.join(bad)})" if bad else ""))
    return "\n".join(lines) + "\n"


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="fraclab", description=__doc__.split("\n\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run one experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--output", help="override the output directory of the config")
    p_rep = sub.add_parser("report", help="aggregate finished run directories")
    p_rep.add_argument("dirs", nargs="+")
    p_rep.add_argument("--output", help="write report.json and report.txt here")
    p_val = sub.add_parser("validate", help="check a config without running it")
    p_val.add_argument("config")
    args = ap.parse_args(argv)

    try:
        if args.command == "validate":
            cfg, _ = load_config(args.config)
            print(f"ok: {cfg.kind} config, schema_version {cfg.schema_version}")
            return 0
        if args.command == "run":
            cfg, base = load_config(args.config)
            man = run(cfg, args.output, base)
            out = Path(args.output or cfg.output)
            txt = out / ("report.txt" if cfg.kind == "full-report" else "summary.txt")
            sys.stdout.write(txt.read_text())
            return 0 if man["status"] == "ok" else 1
        rep = full_report(args.dirs)
        text = report_text(rep)
        if args.output:
            out = Path(args.output)
            out.mkdir(parents=True, exist_ok=True)
            write_json(out / "report.json", rep)
            (out / "report.txt").write_text(text)
        sys.stdout.write(text)
        return 0 if rep["passed"] else 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except MissingInputs as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
