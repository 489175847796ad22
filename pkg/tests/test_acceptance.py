"""Acceptance suite: eleven criteria, one PASS/FAIL line each.

Run alone with ``pytest tests/test_acceptance.py -v``; criterion 9 takes roughly ten minutes.
"""

import csv
import dataclasses
import math
import time
from pathlib import Path

import numpy as np
import pytest

from mperturb.geometry import build_family, l2_norm
from mperturb.lab import load_config, run
from mperturb.lab.validate import (check_cone_invariance, check_garding, check_sandwich, check_unstable)
from mperturb.manifolds import ManifoldParams, stable_manifold, unstable_manifold
from mperturb.perturbation import sweep, symmetric_difference_measure
from mperturb.problem import limit_context, solve_spectrum
from mperturb.spectral import projector_gap

from test_dynamics import self_convergence

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
RESULTS = {}


@pytest.fixture(scope="module", autouse=True)
def summary(request):
    yield
    tr = request.config.pluginmanager.getplugin("terminalreporter")
    if tr is not None and RESULTS:
        tr.write_line("")
        for n in sorted(RESULTS):
            tr.write_line(RESULTS[n])


def report(request, n: int, title: str, passed: bool, detail: str):
    line = f"{'PASS' if passed else 'FAIL'} criterion {n:2d} {title}: {detail}"
    RESULTS[n] = line
    tr = request.config.pluginmanager.getplugin("terminalreporter")
    if tr is not None:
        tr.write_line(line)
    else:
        print(line)
    assert passed, line


@pytest.fixture(scope="module")
def default_cfg():
    return load_config(CONFIGS / "default.toml")


@pytest.fixture(scope="module")
def limit_mask(default_cfg):
    return build_family(default_cfg["family.kind"], 1, default_cfg.grid).limit


@pytest.fixture(scope="module")
def ctx_u(default_cfg, limit_mask):
    return limit_context(default_cfg.problem(), limit_mask, "unstable")[0]


@pytest.fixture(scope="module")
def ctx_s(default_cfg, limit_mask):
    return limit_context(default_cfg.problem(), limit_mask, "stable")[0]


@pytest.fixture(scope="module")
def patch_u(ctx_u):
    return unstable_manifold(ctx_u)


def test_c01_eigenvalue_oracle(request, tmp_path):
    t0 = time.perf_counter()
    store = run(load_config(CONFIGS / "laplacian.toml"), "spectrum", out=tmp_path, stamp="c1")
    elapsed = time.perf_counter() - t0
    rows = [r for r in csv.DictReader((store.root / "spectrum.csv").open()) if r["n"] == "0"]
    got = sorted(-float(r["re"]) for r in rows)[:5]
    exact = [math.pi**2 * s for s in (2, 5, 5, 8, 10)]
    rel = max(abs(g - e) / e for g, e in zip(got, exact))
    report(request, 1, "Laplacian eigenvalues m=63", rel <= 0.02 and elapsed < 30,
           f"max rel err {rel:.3e} (<= 2e-2), runtime {elapsed:.1f}s (< 30s)")


def test_c02_garding(request, default_cfg, limit_mask):
    checks = check_garding(default_cfg.problem(), limit_mask, n_vec=200)
    worst = min(c.value for c in checks)
    report(request, 2, "Garding inequality", all(c.passed for c in checks),
           f"200 vectors x {len(checks)} presets, min relative margin {worst:.3e}")


def test_c03_linear_exactness(request, default_cfg, limit_mask):
    pb = dataclasses.replace(default_cfg.problem(), nonlinearity="zero",
                             manifold=ManifoldParams(directions=4, radial_points=2))
    cu = limit_context(pb, limit_mask, "unstable")[0]
    lip = unstable_manifold(cu).meta["lip"]
    cs = limit_context(pb, limit_mask, "stable")[0]
    ps = stable_manifold(cs)
    xi, _ = cs.split_state(ps.samples[:, cs.mask.indices].T)
    plus = float(np.max(l2_norm(cs.basis.vectors @ xi, cs.h)))
    report(request, 3, "linear exactness", lip <= 1e-8 and plus <= 1e-8,
           f"Lip(h+) {lip:.2e}, max ||X+ part|| {plus:.2e} (both <= 1e-8)")


def test_c04_contraction(request, ctx_u, patch_u):
    m = patch_u.meta
    worst = max(m["ratios"]) if m["ratios"] else 0.0
    ok = ctx_u.d == 1 and worst <= 1.1 * m["K"] and m["iterations"] <= m["m0"] + 3
    report(request, 4, "graph-transform contraction", ok,
           f"d={ctx_u.d}, max ratio {worst:.2e} vs 1.1K={1.1 * m['K']:.3f}, "
           f"iterations {m['iterations']} vs m0+3={m['m0'] + 3}")


def test_c05_cone_invariance(request, ctx_u):
    c = check_cone_invariance(ctx_u, starts=100, steps=50)
    report(request, 5, "cone invariance", c.passed, f"{int(c.value)} violations, {c.detail}")


def test_c06_norm_sandwich(request, ctx_u, ctx_s):
    checks = check_sandwich(ctx_u, n_vec=100) + check_sandwich(ctx_s, n_vec=100)
    viol = sum(int(c.value) for c in checks)
    report(request, 6, "norm sandwiches", all(c.passed for c in checks) and len(checks) == 4,
           f"{viol} violations over {len(checks)} sides x 100 vectors")


def test_c07_tangency(request, ctx_u, patch_u):
    c = next(c for c in check_unstable(ctx_u, patch_u) if c.name == "tangency")
    report(request, 7, "tangency at the origin", c.passed, f"slope ratio {c.value:.3f} (<= 0.6), {c.detail}")


def test_c08_integrator_order(request):
    ratios = self_convergence("cn-ab", (20, 40, 80, 160), 3200)
    report(request, 8, "CN-AB self-convergence", all(3.2 <= r <= 4.8 for r in ratios),
           "ratios " + ", ".join(f"{r:.3f}" for r in ratios) + " in [3.2, 4.8]")


def _trend(seq):
    seq = np.asarray(seq)
    return seq[-1] <= 0.5 * seq[0] and int(np.sum(np.diff(seq) > 0)) <= 1


@pytest.mark.slow
def test_c09_semicontinuity_trend(request):
    cfg = load_config(CONFIGS / "acceptance_dumbbell.toml")
    fam = build_family(cfg["family.kind"], cfg["family.N_max"], cfg.grid)
    pb = cfg.problem()
    t0 = time.perf_counter()
    ok, parts = True, []
    for kind in ("unstable", "stable"):
        rep = sweep(fam, pb, kind).report
        up, lo = rep.column("upper"), rep.column("lower")
        good = len(up) == 4 and _trend(up) and _trend(lo)
        ok &= good
        parts.append(f"{kind}: upper {up[0]:.2e}->{up[-1]:.2e}, lower {lo[0]:.2e}->{lo[-1]:.2e}")
    elapsed = time.perf_counter() - t0
    report(request, 9, "dumbbell semicontinuity trend", ok and elapsed < 900,
           "; ".join(parts) + f"; runtime {elapsed:.0f}s (< 900s)")


def test_c10_fingers(request):
    cfg = load_config(CONFIGS / "fingers.toml")
    fam = build_family(cfg["family.kind"], cfg["family.N_max"], cfg.grid)
    pb = cfg.problem()
    lim = solve_spectrum(pb, fam.limit, "unstable").proj
    gaps, meas, extra = [], [], []
    for _, mask in fam:
        gaps.append(projector_gap(solve_spectrum(pb, mask, "unstable").proj, lim))
        meas.append(symmetric_difference_measure(mask, fam.limit))
        extra.append((mask.n_active - fam.limit.n_active) * cfg.grid.h**2)
    const = max(abs(m - meas[0]) for m in meas) <= 1e-15 and np.allclose(meas, extra, rtol=0, atol=1e-15)
    ok = gaps[-1] < 1e-2 and bool(np.all(np.diff(gaps) < 0)) and const
    report(request, 10, "fingers counterexample", ok,
           "gap_u " + ", ".join(f"{g:.3e}" for g in gaps) + f"; measure gap {meas[0]:.6g} constant={const}")


def test_c11_determinism(request, tmp_path):
    cfg = load_config(CONFIGS / "default.toml")
    a = run(cfg, "validate", out=tmp_path, stamp="r1")
    b = run(cfg, "validate", out=tmp_path, stamp="r2")
    names = sorted(p.name for p in a.root.iterdir() if p.name != "run.json")
    same = [n for n in names if (a.root / n).read_bytes() == (b.root / n).read_bytes()]
    report(request, 11, "validate determinism", same == names and "validation.csv" in names,
           f"{len(same)}/{len(names)} files byte-identical ({', '.join(names)})")
