"""Invariant suite run by ``mperturb validate``."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from ..dynamics import (SemiflowConfig, estimate_lipschitz, evolve, modified_f,
                        random_directions)
from ..geometry import build_family, l2_norm
from ..manifolds import (cone_membership, lip_distance, make_schedule, secant_slope, stable_manifold,
                         unstable_manifold)
from ..operators import assemble, coefficient_preset, form_value, h1_norm
from ..perturbation import lower_semidistance, upper_semidistance
from ..problem import Problem, limit_context, solve_spectrum

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""

    def row(self):
        return (self.name, "pass" if self.passed else "fail", self.value, self.threshold, self.detail)


def _smooth(mask, count, seed):
    return random_directions(mask, count, seed, "smooth")


def check_garding(problem: Problem, mask, n_vec: int = 200, seed: int = 0) -> list:
    """``a(u,u) + lambda_0 ||u||^2 >= alpha_0/2 ||u||_{H1}^2`` on three coefficient presets."""
    out = []
    rng = np.random.default_rng(seed)
    for preset in ("constant", "affine", "trigonometric"):
        params = dict(problem.coefficient_params) if preset == problem.coefficients else {}
        op = assemble(mask, coefficient_preset(preset, mask.grid, **params))
        U = np.hstack([rng.standard_normal((op.n, n_vec // 2)), _smooth(mask, n_vec - n_vec // 2, seed + 3)])
        worst = np.inf
        for u in U.T:
            lhs = form_value(op, u, u) + op.lambda0 * l2_norm(u, op.h) ** 2
            rhs = 0.5 * op.alpha0 * h1_norm(mask, u) ** 2
            worst = min(worst, (lhs - rhs) / rhs)
        out.append(Check(f"garding_{preset}", worst >= -1e-12, worst, 0.0, "min relative margin"))
    return out


def check_spectral(problem: Problem, family) -> list:
    out = []
    d_lim = None
    ranks = {}
    for n, mask in [(0, family.limit)] + list(family):
        s = solve_spectrum(problem, mask, "unstable")
        r = s.proj.residuals
        if n == 0:
            d_lim = s.split.d
            out.append(Check("projector_idempotency", r["idempotency"] <= 1e-6, r["idempotency"], 1e-6))
            out.append(Check("projector_commutation", r["commutation"] <= 1e-6, r["commutation"], 1e-6))
        else:
            ranks[n] = s.split.d
    bad = [n for n, d in ranks.items() if d != d_lim]
    prefix = bad == list(range(1, len(bad) + 1))
    out.append(Check("rank_propagation", prefix, float(len(bad)), 0.0,
                     f"mismatched members {bad}" if bad else "rank(P_n+) = rank(P+) for all n"))
    return out


def check_sandwich(ctx, n_vec: int = 100, seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    rn, dc = ctx.norms, ctx.dichotomy
    P = ctx.basis.projector
    V = P.minus(rng.standard_normal((ctx.op.n, n_vec)))
    l2 = l2_norm(V, ctx.h)
    rv = rn.minus(V, force_flow=True)
    viol_m = int(np.sum((rv < l2 * (1 - 1e-12)) | (rv > dc.M1 * l2 * (1 + 1e-12))))
    out = [Check(f"sandwich_{ctx.kind}_minus", viol_m == 0, float(viol_m), 0.0,
                 f"max ratio {np.max(rv / l2):.6g}, M1={dc.M1:.6g}")]
    if P.d:
        XI = rng.standard_normal((P.d, n_vec))
        l2p = l2_norm(P.R @ XI, ctx.h)
        rp = rn.plus_coords(XI, force_flow=True)
        viol_p = int(np.sum((rp < l2p * (1 - 1e-12)) | (rp > dc.M2 * l2p * (1 + 1e-12))))
        out.append(Check(f"sandwich_{ctx.kind}_plus", viol_p == 0, float(viol_p), 0.0,
                         f"max ratio {np.max(rp / l2p):.6g}, M2={dc.M2:.6g}"))
    return out


def check_cutoff(ctx, seed: int = 0) -> Check:
    nl = ctx.nl
    U = _smooth(ctx.mask, 20, seed) * nl.delta * np.linspace(0.05, 0.99, 20)
    diff = float(np.max(np.abs(modified_f(U, nl) - nl.f(U))))
    return Check("cutoff_agreement", diff == 0.0, diff, 0.0, "f~ = f on ||u|| <= delta")


def check_semiflow(ctx, n: int = 20, seed: int = 0) -> Check:
    """``Phi_0.2`` against ``Phi_0.1 o Phi_0.1`` relative to a step-halving error estimate."""
    U = _smooth(ctx.mask, n, seed + 5) * 0.5 * ctx.nl.delta
    cfg = ctx.flow
    half = SemiflowConfig(cfg.dt / 2, cfg.scheme, cfg.t_horizon)
    a = evolve(cfg, ctx.op, ctx.nl, U, 0.2).final
    b = evolve(cfg, ctx.op, ctx.nl, evolve(cfg, ctx.op, ctx.nl, U, 0.1).final, 0.1).final
    c = evolve(half, ctx.op, ctx.nl, U, 0.2).final
    tol = float(np.max(l2_norm(a - c, ctx.h))) + 1e-13 * float(np.max(l2_norm(U, ctx.h)))
    err = float(np.max(l2_norm(a - b, ctx.h)))
    return Check("semiflow_consistency", err <= 10 * tol, err, 10 * tol)


def check_cone_invariance(ctx, starts: int = 100, steps: int = 50, seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    P = ctx.basis.projector
    flips = 0
    for lam in (ctx.cone.mu, 1.0, ctx.cone.nu):
        V = P.minus(random_directions(ctx.mask, starts, seed + 17, "smooth"))
        V = V / ctx.norm_minus(V)
        XI = rng.standard_normal((ctx.d, starts))
        W = ctx.basis.vectors @ XI
        W = W / ctx.norms.plus(W)
        # boundary of K_lambda, radius inside the cutoff ball
        r = 0.3 * ctx.nl.delta / (1 + lam)
        U = r * V + lam * r * (1 + 1e-12) * W
        inside = np.ones(starts, dtype=bool)
        cfg = ctx.flow
        for _ in range(steps):
            U = evolve(cfg, ctx.op, ctx.nl, U, cfg.dt).final
            xi, v = ctx.split_state(U)
            now = cone_membership(ctx.norm_minus(v), ctx.norm_plus_coords(xi), lam)
            flips += int(np.sum(inside & ~now))
            inside &= now
    return Check("cone_invariance", flips == 0, float(flips), 0.0, f"{starts} starts x 3 lambdas x {steps} steps")


def check_unstable(ctx, patch) -> list:
    m = patch.meta
    K = m["K"]
    ratios = m["ratios"]
    worst = max(ratios) if ratios else 0.0
    out = [Check("contraction_ratio", worst <= 1.1 * K, worst, 1.1 * K),
           Check("iterations_vs_m0", m["iterations"] <= m["m0"] + 3, float(m["iterations"]), float(m["m0"] + 3))]
    s_small = secant_slope(patch.graph, ctx, ctx.R_mesh / 4)
    s_big = secant_slope(patch.graph, ctx, ctx.R_mesh)
    if s_big > 0:
        ratio = s_small / s_big
        out.append(Check("tangency", ratio <= 0.6, ratio, 0.6, f"slopes {s_small:.3g} / {s_big:.3g}"))
    else:
        out.append(Check("tangency", True, 0.0, 0.6, "graph identically zero"))
    # fixed point does not depend on the transform time
    sched2 = make_schedule(ctx.dichotomy, ctx.cone, ctx.params.tol, ctx.params.m_max, 2 * m["t_map"])
    p2 = unstable_manifold(ctx, schedule=sched2)
    dist = lip_distance(patch.graph, p2.graph, ctx)
    out.append(Check("fixed_point_t_independence", dist <= 5 * ctx.params.tol, dist, 5 * ctx.params.tol))
    # local invariance: interior samples stay on the graph under the flow
    g = patch.graph
    second = np.diff(g.values, 2, axis=1) if g.d == 1 else np.zeros((1, 1))
    interp = float(np.max(ctx.norm_minus(second))) if second.size else 0.0
    tol = interp + 1e-9 * ctx.delta_hat
    keep = patch.norms <= 0.5 * ctx.delta_hat
    U = patch.samples[keep][:, ctx.mask.indices].T
    worst = 0.0
    for s in (0.25 * m["t_map"], 0.5 * m["t_map"], m["t_map"]):
        xi, v = ctx.split_state(evolve(ctx.flow, ctx.op, ctx.nl, U, s).final)
        hw = g.axes[0][-1]
        inmesh = np.all(np.abs(xi) <= hw, axis=0)
        dev = ctx.norm_minus(v[:, inmesh] - g(xi[:, inmesh]))
        worst = max(worst, float(np.max(dev)) if dev.size else 0.0)
    out.append(Check("local_invariance", worst <= tol, worst, tol))
    return out


def check_stable(ctx, patch) -> list:
    gr = patch.graph
    mu = ctx.cone.mu
    wn = ctx.norm_plus_coords(gr.XI)
    vn = ctx.norm_minus(gr.V0)
    viol = int(np.sum(wn > mu * vn * (1 + 1e-9)))
    out = [Check("stable_cone", viol == 0, float(viol), 0.0, "||h(v0)||_X+ <= mu ||v0||_X-"),
           Check("stable_lipschitz", gr.lip <= 1.2 * mu, gr.lip, 1.2 * mu)]
    U = patch.samples[1:][:, ctx.mask.indices].T
    times = np.linspace(0, ctx.T_stab, 11)[1:]
    traj = evolve(ctx.flow, ctx.op, ctx.nl, U, ctx.T_stab, sample_times=times)
    dc = ctx.dichotomy
    u0 = l2_norm(U, ctx.h)
    worst = 0.0
    for t, S in zip(traj.times, traj.states):
        bound = 2 * dc.M1 * math.exp((dc.alpha + 2 * ctx.cone.epsilon) * t) * u0
        worst = max(worst, float(np.max(l2_norm(S, ctx.h) / bound)))
    out.append(Check("stable_decay", worst <= 1.0, worst, 1.0, "||Phi_t u|| / (2 M1 e^{(alpha+2eps)t} ||u||)"))
    return out


def check_semidistance_self(patches) -> Check:
    worst = 0.0
    for p in patches:
        h = p.mask.grid.h
        worst = max(worst, upper_semidistance(p.samples, p.samples, h),
                    lower_semidistance(p.samples, p.samples, h))
    return Check("semidistance_self", worst == 0.0, worst, 0.0)


def check_lipschitz_monotone(ctx) -> Check:
    radii = ctx.nl.delta * np.array([0.25, 0.5, 1.0, 2.0, 4.0])
    eps = [estimate_lipschitz(ctx.nl, ctx.mask, r) for r in radii]
    ok = bool(np.all(np.diff(eps) >= 0))
    return Check("lipschitz_monotone", ok, float(eps[-1]), float("nan"), "nondecreasing in radius")


def run_suite(problem: Problem, family_kind: str, N_max: int, progress=None) -> list:
    """All invariant checks on the limit domain of ``family_kind`` (plus its members for ranks)."""
    fam = build_family(family_kind, N_max, problem.grid)
    checks = []

    def note(msg):
        if progress:
            progress(msg)

    note("garding")
    checks += check_garding(problem, fam.limit)
    note("spectral")
    checks += check_spectral(problem, fam)
    note("unstable context")
    cu, _ = limit_context(problem, fam.limit, "unstable")
    checks += check_sandwich(cu)
    checks.append(check_cutoff(cu))
    checks.append(check_lipschitz_monotone(cu))
    checks.append(check_semiflow(cu))
    checks.append(check_cone_invariance(cu))
    note("unstable manifold")
    pu = unstable_manifold(cu)
    checks += check_unstable(cu, pu)
    note("stable context")
    cs, _ = limit_context(problem, fam.limit, "stable")
    checks += check_sandwich(cs)
    note("stable manifold")
    ps = stable_manifold(cs)
    checks += check_stable(cs, ps)
    checks.append(check_semidistance_self([pu, ps]))
    return checks
