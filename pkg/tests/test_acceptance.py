"""Acceptance criteria, run end to end from the configs in configs/acceptance.

Each test prints one ``criterion N: PASS/FAIL`` line (also echoed in the
terminal summary).  Lines tagged ``info`` are reported without asserting.
"""
import csv
import hashlib
import json
import math
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from fraclab import cli

from conftest import ACCEPTANCE_LINES, basis

CONFIGS = sorted((Path(__file__).resolve().parents[1] / "configs" / "acceptance").glob("*.json"))


def report(label, passed, detail=""):
    line = f"{label}: {'PASS' if passed else 'FAIL'}" + (f"  ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)


def info(text):
    line = f"info: {text}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def run_all(root: Path) -> dict[str, Path]:
    dirs = {}
    for p in CONFIGS:
        cfg, base = cli.load_config(p)
        d = root / cfg.name
        cli.run(cfg, d, base)
        dirs[cfg.name] = d
    return dirs


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    return run_all(tmp_path_factory.mktemp("acceptance"))


def summary(d):
    return json.loads((d / "summary.json").read_text())


def load(d, name):
    return json.loads((d / name).read_text())


def rows(d, name):
    with open(d / name, newline="") as fh:
        return list(csv.DictReader(fh))


def tagged(runs, prefix, criterion):
    """All checks of the given criterion across runs whose name starts with prefix."""
    out = []
    for name, d in runs.items():
        if name.startswith(prefix):
            out += [(name, r) for r in summary(d)["checks"] if r["criterion"] == criterion]
    return out


def failing(checks):
    return [f"{n}:{r['name']}" for n, r in checks if not r["passed"]]


def test_criterion_1_operator_oracle(runs):
    checks = tagged(runs, "assemble", 1)
    worst = {}
    decreasing = True
    for s in ("0.25", "0.5", "0.75"):
        data = rows(runs[f"assemble-s{s}"], "oracle_check.csv")
        by_n = {}
        for r in data:
            by_n.setdefault(int(r["n"]), []).append(float(r["rel_error"]))
        ns = sorted(by_n)
        errs = [max(by_n[n]) for n in ns]
        assert ns[-1] == 1024 and all(len(by_n[n]) == 10 for n in ns)
        decreasing &= all(a > b for a, b in zip(errs, errs[1:])) and len(ns) >= 3
        worst[s] = errs[-1]
    ok = not failing(checks) and decreasing and max(worst.values()) <= 0.02
    report("criterion 1", ok, ", ".join(f"s={s} {e:.2e}" for s, e in worst.items()))
    assert ok, failing(checks)


def test_criterion_2_weyl(runs):
    checks = tagged(runs, "spectrum", 2)
    slopes = {}
    for s in ("0.25", "0.5", "0.6", "0.75", "0.9"):
        d = runs[f"spectrum-s{s}"]
        ev = rows(d, "eigenvalues.csv")
        j = np.array([int(r["j"]) for r in ev])
        lam = np.array([float(r["lambda"]) for r in ev])
        sel = (j >= 10) & (j <= 40)
        slope = stats.linregress(np.log(j[sel]), np.log(lam[sel])).slope
        assert slope == pytest.approx(load(d, "weyl_fit.json")["slope"], rel=1e-12)
        slopes[s] = slope
    ok = not failing(checks) and all(abs(v - 2 * float(s)) <= 0.1 for s, v in slopes.items())
    report("criterion 2", ok, ", ".join(f"s={s} {v:.3f}" for s, v in slopes.items()))
    assert ok, failing(checks)


def test_criterion_3_wave_identities(runs):
    checks = tagged(runs, "wave", 3)
    names = {r["name"] for _, r in checks}
    assert {"energy_conservation", "equipartition", "pohozaev_J4", "pohozaev_refinement_J4"} <= names
    finest = {}
    for name in ("wave-s0.5", "wave-s0.75"):
        data = rows(runs[name], "pohozaev.csv")
        for J in {r["J"] for r in data}:
            seq = [(int(r["n"]), float(r["residual"])) for r in data if r["J"] == J]
            seq.sort()
            assert seq[-1][0] == 1024 and len(seq) >= 4
            assert all(a[1] > b[1] for a, b in zip(seq, seq[1:]))
            finest[(name, int(J))] = seq[-1][1]
    ok = not failing(checks) and max(finest.values()) <= 5e-2
    report("criterion 3", ok, f"worst Pohozaev {max(finest.values()):.2e} at n=1024")
    assert ok, failing(checks)


def test_pohozaev_low_order_info():
    from fraclab.wave import ModalWaveState, pohozaev_residual
    b = basis(0.25, 1024, 4, -1.0, 1.0)
    r1 = pohozaev_residual(b, ModalWaveState([1.0, 0, 0, 0], [0.3, 0, 0, 0]), 4.0)
    r4 = pohozaev_residual(b, ModalWaveState([1.0, -0.5, 0.25, 0.1], [0.3, 0.2, -0.1, 0.05]), 4.0)
    info(f"Pohozaev residual at s=0.25, n=1024: J=1 {r1:.3e}, J=4 {r4:.3e} (tolerance 5e-2)")


def test_criterion_4_wave_observability(runs):
    checks = tagged(runs, "wave", 4)
    d = runs["wave-s0.75"]
    kap = {}
    for r in rows(d, "kappa.csv"):
        kap[(int(r["J"]), float(r["T"]))] = float(r["kappa"])
    Js = sorted({k[0] for k in kap})
    Ts = sorted({k[1] for k in kap})
    assert Js == [2, 4, 8, 16] and len(Ts) == 25
    K = np.array([[kap[(J, T)] for T in Ts] for J in Js])
    mono = bool(np.all(np.diff(K, axis=1) >= 0) and np.all(np.diff(K, axis=0) <= 0))
    ok = not failing(checks) and mono
    g = load(d, "gamma.json")
    report("criterion 4", ok, "Gramian PSD, kappa monotone, T0 nondecreasing")
    info(f"fitted gamma at s=0.75: {g['gamma_hat']:.3f} vs 1-s = {g['gamma_ref']}, "
         f"tolerance {g['tolerance']} (exploratory, not asserted)")
    assert ok, failing(checks)


def test_criterion_5_transmutation(runs):
    checks = tagged(runs, "transmute", 5)
    d = runs["transmute-s0.75"]
    transfer = load(d, "transfer.json")
    assert len({r["sample"] for r in transfer["records"]}) == 10
    assert transfer["s"] == 0.75 and transfer["J"] == 4
    values = {r["name"]: r["value"] for _, r in checks}
    report("criterion 5", not failing(checks),
           ", ".join(f"{k} {v:.3g}" for k, v in values.items()))
    assert not failing(checks), failing(checks)


def test_transmuted_residual_higher_order_info():
    from fraclab.heat import ModalHeatState
    from fraclab.transmute import KernelSpec, transmuted_solution
    b = basis(0.75, 1024, 64)
    J = int(np.searchsorted(b.eigenvalues, 1e3, side="right"))
    sol = transmuted_solution(b, ModalHeatState(np.ones(J)), KernelSpec(2.0, 1.0, 3.0, 48),
                              np.linspace(-0.5, 0.5, 11))
    info(f"transmuted modal residual at Mser=48 for lambda <= 1e3: {sol.ode_residual.max():.2e}")


def test_criterion_6_hum(runs):
    checks = tagged(runs, "hum", 6)
    r2 = {}
    for s in ("0.6", "0.75", "0.9"):
        d = runs[f"hum-s{s}"]
        data = rows(d, "hum.csv")
        assert {(int(r["J"]), float(r["T"])) for r in data} == {(J, T) for J in (2, 4, 8)
                                                               for T in (0.25, 1.0, 4.0)}
        assert max(float(r["projection_residual"]) for r in data) <= 1e-8
        assert max(float(r["duality_residual"]) for r in data) <= 1e-9
        c = rows(d, "cost_fit.csv")
        T = np.array([float(r["T"]) for r in c])
        cost = np.array([float(r["cost_sq"]) for r in c])
        # the fit normalizes by |u0|^2, which shifts only the intercept
        r2[s] = stats.linregress(1 / T, np.log(cost * T)).rvalue ** 2
        assert r2[s] == pytest.approx(load(d, "cost_fit.json")["r2"], rel=1e-10)
    ok = not failing(checks) and min(r2.values()) >= 0.9
    report("criterion 6", ok, "cost-fit R^2 " + ", ".join(f"s={s} {v:.3f}" for s, v in r2.items()))
    assert ok, failing(checks)


def test_criterion_7_heat_blowup(runs):
    checks = tagged(runs, "heat", 7)
    d = runs["heat-s0.75"]
    fit = load(d, "blowup_fit.json")
    assert fit["J"] == 8 and fit["Tmin"] == pytest.approx(0.05) and fit["Tmax"] == pytest.approx(0.5)
    ok = not failing(checks) and fit["r2"] >= 0.95
    report("criterion 7", ok, f"R^2 {fit['r2']:.4f}")
    assert ok, failing(checks)


def test_criterion_8_lebeau_robbiano(runs):
    checks = tagged(runs, "lr", 8)
    led = load(runs["lr-s0.75"], "ledger.json")
    st = led["stages"]
    assert len(st) == 5
    posts = [r["norm_post"] for r in st]
    rss = math.sqrt(math.fsum(r["cost"] ** 2 for r in st))
    rss_ok = math.isfinite(led["total_cost"]) and abs(led["total_cost"] - rss) <= 1e-12 * rss
    gam = (1 - 2 ** (-2 / 3)) / 2
    sched_ok = all(r["tau"] == pytest.approx(gam * 2 ** (-2 * r["index"] / 3), rel=1e-15)
                   and r["threshold"] == 4.0 ** r["index"] for r in st)
    decay_ok = all(a > b for a, b in zip(posts, posts[1:])) and led["terminal_ratio"] <= 1e-6
    contrast = [r["cost"] for r in load(runs["lr-s0.4"], "ledger.json")["stages"] if not r["skipped"]]
    contrast_ok = len(contrast) >= 4 and all(a < b for a, b in zip(contrast, contrast[1:]))
    ok = not failing(checks) and rss_ok and sched_ok and decay_ok and contrast_ok
    report("criterion 8", ok, f"terminal ratio {led['terminal_ratio']:.2e}, "
           f"s=0.4 stage costs {', '.join(f'{c:.3g}' for c in contrast)}")
    assert ok, failing(checks)


def csv_digests(root: Path) -> dict[str, str]:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*.csv"))}


def test_criterion_9_determinism(runs, tmp_path):
    root = next(iter(runs.values())).parent
    again = run_all(tmp_path)
    first, second = csv_digests(root), csv_digests(tmp_path)
    assert set(again) == set(runs)
    differ = sorted(k for k in first if first[k] != second.get(k))
    ok = bool(first) and first.keys() == second.keys() and not differ
    report("criterion 9", ok, f"{len(first)} CSV files compared" + (f", differing: {differ}" if differ else ""))
    assert ok
