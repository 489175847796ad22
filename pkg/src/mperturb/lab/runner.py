"""Subcommand orchestration: geometry -> operators -> spectral -> dynamics -> manifolds -> perturbation."""

from __future__ import annotations

import logging

import numpy as np

from ..dynamics import evolve, random_directions, trajectory_rows
from ..errors import MperturbError, ValidationError
from ..geometry import build_family, save_mask
from ..manifolds import write_patch
from ..perturbation import basis_alignment, sweep, write_report
from ..problem import limit_context, solve_spectrum
from ..spectral import complement_gap, projector_gap
from .config import ExperimentConfig
from .store import ResultStore, create_store, write_csv
from .validate import run_suite

logger = logging.getLogger(__name__)

SUBCOMMANDS = ("spectrum", "manifold unstable", "manifold stable", "sweep", "validate")


class StageError(MperturbError):
    """Wraps a module error with the stage it came from; keeps the original type for exit codes."""

    def __init__(self, stage: str, exc: MperturbError):
        super().__init__(f"[{stage}] {exc}")
        self.stage = stage
        self.original = exc


def _family(cfg: ExperimentConfig):
    return build_family(cfg["family.kind"], cfg["family.N_max"], cfg.grid)


def _spectrum(cfg, store: ResultStore):
    problem = cfg.problem()
    fam = _family(cfg)
    kind = cfg["split.kind"]
    rows, gaps = [], []
    with store.time("spectrum"):
        lim = solve_spectrum(problem, fam.limit, kind)
        for n, mask in [(0, fam.limit)] + list(fam):
            s = lim if n == 0 else solve_spectrum(problem, mask, kind)
            cls = {id(e): c for c, grp in (("stable", s.split.sigma_s), ("centre", s.split.sigma_c),
                                           ("unstable", s.split.sigma_u)) for e in grp}
            for j, e in enumerate(s.split.eigs, start=1):
                rows.append((n, j, float(e.value.real), float(e.value.imag), cls[id(e)], float(e.residual)))
            if n:
                gaps.append((n, projector_gap(s.proj, lim.proj), complement_gap(s.proj, lim.proj)))
    store.add(write_csv(store.path("spectrum.csv"), ["n", "j", "re", "im", "class", "residual"], rows))
    store.add(write_csv(store.path("projector_gaps.csv"), ["n", "gap_u", "gap_c"], gaps))
    store.summary.update(d=lim.split.d, hyperbolic=lim.split.hyperbolic,
                         rightmost=[float(v.real) for v in lim.split.values[:5]])


def _manifold(cfg, store: ResultStore, kind: str):
    problem = cfg.problem()
    fam = _family(cfg)
    with store.time("context"):
        ctx, solved = limit_context(problem, fam.limit, kind)
    with store.time("manifold"):
        if kind == "unstable":
            from ..manifolds import unstable_manifold
            patch = unstable_manifold(ctx)
        else:
            from ..manifolds import stable_manifold
            patch = stable_manifold(ctx)
    stem = f"{fam.kind}_{kind}_{store.stamp}"
    store.add(*write_patch(patch, store.root, stem).values())
    save_mask(fam.limit, store.path("limit_mask.txt"))
    store.add(store.path("limit_mask.txt"))
    # one trajectory of the modified flow from a small smooth start
    u0 = random_directions(fam.limit, 1, problem.seed, "smooth")[:, 0] * 0.5 * ctx.nl.delta
    with store.time("trajectory"):
        times = np.linspace(0.0, ctx.flow.t_horizon, 51)
        traj = evolve(ctx.flow, ctx.op, ctx.nl, u0, ctx.flow.t_horizon, sample_times=times)
    store.add(write_csv(store.path("trajectory.csv"), ["t", "norm_l2", "norm_plus", "norm_minus"],
                        trajectory_rows(traj, solved.proj)))
    store.summary.update(n_samples=int(patch.samples.shape[0]),
                         **{k: patch.meta[k] for k in ("alpha", "beta", "gamma", "mu", "nu", "epsilon",
                                                       "delta_hat", "lip") if k in patch.meta})


def _sweep(cfg, store: ResultStore, threads: int):
    problem = cfg.problem()
    fam = _family(cfg)
    kind = cfg["split.kind"]
    with store.time("sweep"):
        res = sweep(fam, problem, kind, threads=threads)
    store.add(*write_report(res.report, store.root, store.stamp).values())
    if kind == "unstable":
        with store.time("alignment"):
            rows = basis_alignment(res)
        store.add(write_csv(store.path("alignment.csv"), ["n", "probe", "value"], rows))
    store.summary.update(flags=res.report.flags, rejected={str(k): v for k, v in res.report.rejected.items()},
                         upper=[r["upper"] for r in res.report.records],
                         lower=[r["lower"] for r in res.report.records])


def _validate(cfg, store: ResultStore):
    problem = cfg.problem()
    with store.time("validate"):
        checks = run_suite(problem, cfg["family.kind"], cfg["family.N_max"], progress=logger.info)
    store.add(write_csv(store.path("validation.csv"), ["check", "status", "value", "threshold", "detail"],
                        [c.row() for c in checks]))
    failed = [c.name for c in checks if not c.passed]
    store.summary.update(checks=len(checks), failed=failed)
    if failed:
        raise ValidationError("validation failed: " + ", ".join(failed))


def run(cfg: ExperimentConfig, subcommand: str, out=None, threads: int | None = None,
        seed: int | None = None, stamp: str | None = None) -> ResultStore:
    """Run one subcommand; the manifest is written even when the run fails."""
    if subcommand not in SUBCOMMANDS:
        raise ValueError(f"unknown subcommand {subcommand!r}; choose from {', '.join(SUBCOMMANDS)}")
    over = {}
    if seed is not None:
        over["run__seed"] = seed
    if threads is not None:
        over["run__threads"] = threads
    if out is not None:
        over["run__out"] = str(out)
    if stamp is not None:
        over["run__stamp"] = stamp
    if over:
        cfg = cfg.with_overrides(**over)
    # the stamp names the run; it is recorded in run.json, not in the reproducible manifest
    echo = {k: v for k, v in cfg.echo().items() if k != "run.stamp"}
    store = create_store(cfg["run.out"], subcommand, echo, cfg["run.seed"], cfg["run.stamp"])
    try:
        if subcommand == "spectrum":
            _spectrum(cfg, store)
        elif subcommand.startswith("manifold"):
            _manifold(cfg, store, subcommand.split()[1])
        elif subcommand == "sweep":
            _sweep(cfg, store, cfg["run.threads"])
        else:
            _validate(cfg, store)
        store.status = "ok"
    except ValidationError:
        store.status = "validation-failed"
        raise
    except MperturbError as exc:
        store.status = "error"
        store.summary["error"] = str(exc)
        raise StageError(subcommand, exc) from exc
    finally:
        store.write_manifest()
    return store
