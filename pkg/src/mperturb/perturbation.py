"""Upper and lower semicontinuity of manifold patches across a domain family."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .dynamics import random_directions
from .errors import NumericalError
from .geometry import DomainFamily, extend_by_zero, full_mask, restrict_to
from .manifolds import (ManifoldContext, ManifoldPatch, _jsonable, stable_manifold, unstable_manifold,
                        unstable_samples)
from .problem import Problem, limit_context, try_member
from .spectral import projector_gap

logger = logging.getLogger(__name__)


def _points(S) -> np.ndarray:
    S = np.asarray(S, dtype=float)
    if S.ndim == 1:
        S = S[None, :]
    if S.shape[0] == 0:
        raise ValueError("semidistance needs nonempty sample sets")
    return S


def upper_semidistance(samples_n, samples, h: float = 1.0) -> float:
    """``max_{v in samples_n} min_{u in samples} ||v - u||`` (rows are points, grid norm scaled by ``h``)."""
    A, B = _points(samples_n), _points(samples)
    if A.shape[1] != B.shape[1]:
        raise ValueError("sample sets live in different spaces")
    return float(h * cdist(A, B).min(axis=1).max())


def lower_semidistance(samples, samples_n, h: float = 1.0) -> float:
    """``max_{u in samples} min_{v in samples_n} ||v - u||``."""
    return upper_semidistance(samples, samples_n, h)


def symmetric_difference_measure(mask_n, mask) -> float:
    """``||1_{Omega_n} - 1_Omega||^2_{L2(D)} = |Omega_n Δ Omega|``."""
    a = mask_n.active.ravel()
    b = mask.active.ravel()
    return float(np.count_nonzero(a ^ b) * mask.grid.h**2)


@dataclass(eq=False)
class SemicontinuityReport:
    family: str
    kind: str
    records: list
    params: dict
    flags: list = field(default_factory=list)
    rejected: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def column(self, key) -> np.ndarray:
        return np.array([r[key] for r in self.records], dtype=float)

    @property
    def accepted(self) -> list:
        return [r for r in self.records if not r["rejected"]]


@dataclass(eq=False)
class SweepResult:
    report: SemicontinuityReport
    limit: ManifoldContext
    limit_patch: ManifoldPatch
    members: dict  # n -> (context, patch)


def _patch(ctx: ManifoldContext) -> ManifoldPatch:
    return unstable_manifold(ctx) if ctx.kind == "unstable" else stable_manifold(ctx)


def _half_density(ctx: ManifoldContext, patch: ManifoldPatch) -> np.ndarray:
    """The same patch sampled at roughly half the density."""
    if patch.kind == "unstable":
        pts = max(3, ctx.params.sample_points // 2)
        _, U, _ = unstable_samples(ctx, patch.graph, pts)
        return extend_by_zero(U, ctx.mask).T
    keep = np.ones(patch.samples.shape[0], dtype=bool)
    keep[1:] = patch.coords[1:, 0] % 2 == 0  # every other direction, origin kept
    return patch.samples[keep]


def _eig_errors(ctx_n: ManifoldContext, limit: ManifoldContext, count: int = 3):
    a = limit.split.values
    b = ctx_n.split.values
    k = min(count, len(a), len(b))
    out = [float(abs(b[j] - a[j])) for j in range(k)]
    return out + [float("nan")] * (count - k)


def _process(n, mask, problem, limit, limit_patch, half_limit):
    ctx, reason = try_member(problem, mask, limit)
    mgap = symmetric_difference_measure(mask, limit.mask)
    if ctx is None:
        rec = dict(n=n, upper=float("nan"), lower=float("nan"), gap_u=float("nan"),
                   eig_err=[float("nan")] * 3, measure_gap=mgap, rejected=True, reason=reason,
                   n_samples=0, n_samples_limit=int(limit_patch.samples.shape[0]), sampling_change=0.0)
        return n, rec, None, None
    patch = _patch(ctx)
    h = mask.grid.h
    up = upper_semidistance(patch.samples, limit_patch.samples, h)
    lo = lower_semidistance(limit_patch.samples, patch.samples, h)
    half = _half_density(ctx, patch)
    change = max(abs(upper_semidistance(half, half_limit, h) - up),
                 abs(lower_semidistance(half_limit, half, h) - lo))
    rec = dict(n=n, upper=up, lower=lo, gap_u=projector_gap(ctx.basis.projector, limit.basis.projector),
               eig_err=_eig_errors(ctx, limit), measure_gap=mgap, rejected=False, reason="",
               n_samples=int(patch.samples.shape[0]), n_samples_limit=int(limit_patch.samples.shape[0]),
               sampling_change=float(change))
    return n, rec, ctx, patch


def sweep(family: DomainFamily, problem: Problem, kind: str, threads: int = 1,
          limit=None) -> SweepResult:
    """Build the limit patch once and compare every member's patch against it.

    ``limit`` may pass a precomputed ``(context, patch)`` pair.
    """
    t0 = time.perf_counter()
    if limit is None:
        ctx, _ = limit_context(problem, family.limit, kind)
        lpatch = _patch(ctx)
    else:
        ctx, lpatch = limit
    half_limit = _half_density(ctx, lpatch)
    items = list(family)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda it: _process(it[0], it[1], problem, ctx, lpatch, half_limit), items))
    else:
        results = [_process(n, m, problem, ctx, lpatch, half_limit) for n, m in items]
    results.sort(key=lambda r: r[0])
    records = [r[1] for r in results]
    members = {r[0]: (r[2], r[3]) for r in results if r[2] is not None}
    rejected = {r[0]: r[1]["reason"] for r in results if r[1]["rejected"]}
    if not members:
        raise NumericalError("all family members were rejected: " + "; ".join(
            f"n={n}: {why}" for n, why in rejected.items()))
    flags = []
    ns = [r["n"] for r in records]
    rej_n = sorted(rejected)
    if rej_n and rej_n != ns[: len(rej_n)]:
        flags.append("rejections-not-prefix")
    if kind == "stable":
        mg = np.array([r["measure_gap"] for r in records])
        if not np.all(np.diff(mg) < 0):
            flags.append("hypothesis-unmet:measure-convergence")
    for r in records:
        r["flags"] = ";".join(filter(None, ["rejected" if r["rejected"] else ""] + flags))
    dc, cone = ctx.dichotomy, ctx.cone
    params = dict(alpha=dc.alpha, beta=dc.beta, gamma=cone.gamma, mu=cone.mu, nu=cone.nu,
                  epsilon=cone.epsilon, delta=ctx.nl.delta, delta_hat=ctx.delta_hat,
                  M1=dc.M1, M2=dc.M2, sigma=dc.sigma_decay)
    meta = dict(limit=lpatch.meta, limit_eigs=[[v.real, v.imag] for v in ctx.split.values],
                runtime_s=time.perf_counter() - t0, threads=threads,
                members={n: {k: v for k, v in p.meta.items() if k in ("iterations", "lip", "K", "t_map", "m0")}
                         for n, (_, p) in members.items()})
    report = SemicontinuityReport(family.kind, kind, records, params, flags, rejected, meta)
    return SweepResult(report, ctx, lpatch, members)


def basis_alignment(result: SweepResult, probes=None, count: int = 10, seed: int = 11) -> list:
    """``||h_n(P_n+ u|Omega_n) - h(P+ u|Omega)||_{L2(D)}`` per member and probe.

    Probes are fixed smooth fields on the box scaled so their X+ parts stay
    inside the limit mesh.  Returns rows ``(n, probe, value)``.
    """
    limit = result.limit
    if limit.kind != "unstable":
        raise ValueError("basis_alignment needs an unstable sweep")
    grid = limit.mask.grid
    if probes is None:
        probes = random_directions(full_mask(grid), count, seed, "smooth")
    probes = np.asarray(probes, dtype=float)
    g = result.limit_patch.graph

    def graph_values(ctx, graph, U):
        xi = ctx.basis.coords(restrict_to(U, ctx.mask))
        hw = graph.axes[0][-1]
        xi = np.clip(xi, -hw, hw)
        return extend_by_zero(graph(xi), ctx.mask)

    xi0 = limit.basis.coords(restrict_to(probes, limit.mask))
    scale = 0.5 * g.axes[0][-1] / np.maximum(np.max(np.abs(xi0), axis=0), 1e-300)
    U = probes * np.minimum(scale, 1.0)
    ref = graph_values(limit, g, U)
    rows = []
    for n, (ctx, patch) in sorted(result.members.items()):
        val = graph_values(ctx, patch.graph, U)
        diff = grid.h * np.sqrt(np.sum((val - ref) ** 2, axis=0))
        rows += [(n, j, float(x)) for j, x in enumerate(diff)]
    return rows


# ---------------------------------------------------------------------------
# output


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    return "nan" if x != x else f"{x:.17g}"


def write_report(report: SemicontinuityReport, directory, stamp: str | None = None) -> dict:
    """``{family}_{kind}_{stamp}.csv`` plus a JSON sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stamp = stamp or time.strftime("%Y%m%dT%H%M%S")
    stem = f"{report.family}_{report.kind}_{stamp}"
    lines = ["n,upper,lower,gap_u,eig_err_1,eig_err_2,eig_err_3,measure_gap,flags"]
    for r in report.records:
        cells = [str(r["n"]), _fmt(r["upper"]), _fmt(r["lower"]), _fmt(r["gap_u"])]
        cells += [_fmt(e) for e in r["eig_err"]] + [_fmt(r["measure_gap"]), r["flags"]]
        lines.append(",".join(cells))
    csv = directory / f"{stem}.csv"
    csv.write_text("\n".join(lines) + "\n", newline="\n")
    side = dict(family=report.family, kind=report.kind, params=report.params, flags=report.flags,
                rejected=report.rejected,
                samples={r["n"]: dict(member=r["n_samples"], limit=r["n_samples_limit"],
                                      sampling_change=r["sampling_change"]) for r in report.records},
                meta={k: v for k, v in report.meta.items() if k != "runtime_s"})
    js = directory / f"{stem}.json"
    js.write_text(json.dumps(_jsonable(side), indent=2, sort_keys=True) + "\n", newline="\n")
    return {"csv": csv, "json": js}
