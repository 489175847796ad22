"""Local unstable manifolds by the graph transform and local stable manifolds
by cone-exit shooting, both for the cutoff-modified system."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.spatial import Delaunay

from .dynamics import (CutoffNonlinearity, DichotomyConstants, RenormedNorm, SemiflowConfig,
                       _cn_factors, _expeuler_step, evolve, modified_f, random_directions)
from .errors import ConfigError, ConvergenceError, CoverageError, InfeasibleParametersError, NumericalError
from .geometry import DomainMask, extend_by_zero, full_mask, l2_norm, restrict_to
from .operators import EllipticOperator
from .spectral import SpectralSplit, SubspaceBasis

logger = logging.getLogger(__name__)

MU_GRID = (0.5, 0.25, 0.1)
NU_GRID = (2.0, 4.0, 10.0)
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


# ---------------------------------------------------------------------------
# cone parameters


@dataclass(frozen=True)
class ConeParams:
    mu: float
    nu: float
    gamma: float
    epsilon: float
    feasible: bool = True
    violated: str = ""


def cone_constraints(alpha: float, beta: float, eps: float, mu: float, nu: float):
    """Check the rate/opening inequalities; returns ``(ok, lo, hi, violated)``.

    ``(lo, hi)`` is the admissible interval for ``gamma``.
    """
    bound = (beta - alpha) / (2.0 + nu + 1.0 / mu)
    lo = max(eps * (1.0 + 1.0 / mu) - beta, -beta + 2.0 * eps)
    hi = min(-eps * (1.0 + nu) - alpha, -alpha - 2.0 * eps)
    if not eps < bound:
        return False, lo, hi, f"epsilon={eps:.6g} >= (beta-alpha)/(2+nu+1/mu)={bound:.6g}"
    if not lo < hi:
        return False, lo, hi, f"empty gamma interval ({lo:.6g}, {hi:.6g})"
    return True, lo, hi, ""


def select_cone_params(dc, epsilon: float, raise_on_fail: bool = True) -> ConeParams:
    """First feasible ``(mu, nu)`` on the grid ``{0.5, 0.25, 0.1} x {2, 4, 10}``.

    ``dc`` is a ``DichotomyConstants`` or an ``(alpha, beta)`` pair.  ``gamma``
    is the midpoint of the admissible interval.
    """
    alpha, beta = (dc.alpha, dc.beta) if hasattr(dc, "alpha") else dc
    if not beta > alpha:
        raise ValueError("select_cone_params needs beta > alpha")
    eps = float(epsilon)
    quarter = (beta - alpha) / 4.0
    violated = ""
    if not eps < quarter:
        violated = f"epsilon={eps:.6g} >= (beta-alpha)/4={quarter:.6g}"
    else:
        for mu in MU_GRID:
            for nu in NU_GRID:
                ok, lo, hi, why = cone_constraints(alpha, beta, eps, mu, nu)
                if ok:
                    return ConeParams(mu, nu, 0.5 * (lo + hi), eps)
                violated = violated or why
    if raise_on_fail:
        raise InfeasibleParametersError(
            f"no feasible cone parameters: {violated}; shrink the cutoff radius delta to reduce epsilon"
        )
    return ConeParams(MU_GRID[0], NU_GRID[0], float("nan"), eps, False, violated)


def cone_membership(v_norm_minus, w_norm_plus, lam: float):
    """``lam ||v||_{X-} <= ||w||_{X+}`` (closed cone)."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    return np.asarray(lam * np.asarray(v_norm_minus) <= np.asarray(w_norm_plus))


def contraction_constant(dc, cone: ConeParams, t: float) -> float:
    mu, nu, eps = cone.mu, cone.nu, cone.epsilon
    rate = dc.alpha - dc.beta + eps * (2.0 + mu + 1.0 / nu)
    return nu / (nu - mu) * math.exp(rate * t)


def solve_t_map(dc, cone: ConeParams, target: float = 0.5) -> float:
    """Time at which the contraction constant equals ``target``."""
    mu, nu, eps = cone.mu, cone.nu, cone.epsilon
    rate = dc.alpha - dc.beta + eps * (2.0 + mu + 1.0 / nu)
    if rate >= 0:
        raise InfeasibleParametersError("contraction exponent is nonnegative; graph transform cannot contract")
    return math.log(target * (nu - mu) / nu) / rate


@dataclass(frozen=True)
class FixedPointSchedule:
    t_map: float
    K: float
    m_max: int
    tol: float
    m0: int


def make_schedule(dc, cone: ConeParams, tol: float = 1e-8, m_max: int = 60,
                  t_map: float | None = None) -> FixedPointSchedule:
    t = solve_t_map(dc, cone) if t_map is None else float(t_map)
    K = contraction_constant(dc, cone, t)
    if not K < 1:
        raise InfeasibleParametersError(f"contraction constant K={K:.4g} >= 1 at t_map={t:.4g}")
    m0 = max(1, math.ceil(math.log(tol * (1 - K) / (2.0 / cone.nu)) / math.log(K)))
    return FixedPointSchedule(t, K, m_max, tol, m0)


# ---------------------------------------------------------------------------
# graph functions on tensor meshes


def _cell_weights_1d(axis, x):
    n = len(axis)
    i = np.clip(np.searchsorted(axis, x, side="right") - 1, 0, n - 2)
    t = (x - axis[i]) / (axis[i + 1] - axis[i])
    return i, t


def multilinear_weights(axes, Q) -> sp.csr_matrix:
    """Sparse ``(N_nodes, k)`` weights of multilinear interpolation at queries ``Q (d, k)``."""
    d = len(axes)
    k = Q.shape[1]
    for a, ax in enumerate(axes):
        span = ax[-1] - ax[0]
        if np.any(Q[a] < ax[0] - 1e-9 * span) or np.any(Q[a] > ax[-1] + 1e-9 * span):
            raise CoverageError("interpolation query outside the mesh")
    cols = np.arange(k)
    if d == 1:
        i, t = _cell_weights_1d(axes[0], Q[0])
        rows = np.concatenate([i, i + 1])
        vals = np.concatenate([1 - t, t])
        cc = np.concatenate([cols, cols])
        return sp.csr_matrix((vals, (rows, cc)), shape=(len(axes[0]), k))
    i, s = _cell_weights_1d(axes[0], Q[0])
    j, t = _cell_weights_1d(axes[1], Q[1])
    n1 = len(axes[1])
    rows, vals, cc = [], [], []
    for di, wi in ((0, 1 - s), (1, s)):
        for dj, wj in ((0, 1 - t), (1, t)):
            rows.append((i + di) * n1 + (j + dj))
            vals.append(wi * wj)
            cc.append(cols)
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cc))),
                         shape=(len(axes[0]) * n1, k))


@dataclass(eq=False)
class GraphFunction:
    """``h : X+ -> X-`` by nodal values on a tensor mesh of basis coordinates.

    ``values[:, i]`` is the X- nodal vector at node ``i``; nodes are ordered
    C-style over ``axes`` (``ij`` indexing).
    """

    axes: tuple
    values: np.ndarray
    lip: float = 0.0

    @property
    def d(self) -> int:
        return len(self.axes)

    @property
    def nodes(self) -> np.ndarray:
        grids = np.meshgrid(*self.axes, indexing="ij")
        return np.array([g.ravel() for g in grids])

    @property
    def zero_index(self) -> int:
        idx = [int(np.argmin(np.abs(ax))) for ax in self.axes]
        return int(np.ravel_multi_index(idx, [len(ax) for ax in self.axes]))

    def __call__(self, xi) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        vec = xi.ndim == 1
        Q = xi.reshape(self.d, -1)
        out = self.values @ multilinear_weights(self.axes, Q).toarray()
        return out[:, 0] if vec else out

    def adjacent_pairs(self):
        """Index pairs of mesh neighbours (axis-aligned and, for d=2, diagonal)."""
        shape = [len(ax) for ax in self.axes]
        idx = np.arange(int(np.prod(shape))).reshape(shape)
        pairs = []
        if self.d == 1:
            pairs.append((idx[:-1], idx[1:]))
        else:
            pairs += [(idx[:-1, :], idx[1:, :]), (idx[:, :-1], idx[:, 1:]),
                      (idx[:-1, :-1], idx[1:, 1:]), (idx[1:, :-1], idx[:-1, 1:])]
        a = np.concatenate([p[0].ravel() for p in pairs])
        b = np.concatenate([p[1].ravel() for p in pairs])
        return a, b


def mesh_axes(d: int, half_width: float, points: int) -> tuple:
    if d not in (1, 2):
        raise ConfigError(f"X+ meshes support d <= 2 only, got d={d}")
    if points < 3:
        raise ConfigError("mesh needs at least 3 points per axis")
    points += 1 - points % 2  # odd, so the origin is a node
    ax = np.linspace(-half_width, half_width, points)
    ax[points // 2] = 0.0
    return tuple(ax.copy() for _ in range(d))


def zero_graph(axes, n: int) -> GraphFunction:
    N = int(np.prod([len(a) for a in axes]))
    return GraphFunction(tuple(axes), np.zeros((n, N)), 0.0)


# ---------------------------------------------------------------------------
# context


@dataclass(frozen=True)
class ManifoldParams:
    """Numerical knobs of the manifold constructions (all exposed in config)."""

    R_mesh: float | None = None
    mesh_points: int = 41
    tol: float = 1e-8
    m_max: int = 60
    t_map: float | None = None
    T_stab: float | None = None
    search_tol: float = 1e-7
    directions: int = 16
    radial_points: int = 3
    sample_points: int = 161
    delta1: float | None = None
    delta2: float | None = None
    guard: float = 1.15
    probe_seed: int = 7
    cone_stride: int | None = None


@dataclass(eq=False)
class ManifoldContext:
    kind: str
    op: EllipticOperator
    split: SpectralSplit
    basis: SubspaceBasis
    nl: CutoffNonlinearity
    dichotomy: DichotomyConstants
    norms: RenormedNorm
    cone: ConeParams
    flow: SemiflowConfig
    params: ManifoldParams
    R_mesh: float
    delta1: float
    delta2: float
    delta_hat: float
    T_stab: float
    _fplus: float = field(default=0.0)

    @property
    def mask(self) -> DomainMask:
        return self.op.mask

    @property
    def h(self) -> float:
        return self.op.h

    @property
    def d(self) -> int:
        return self.basis.d

    @property
    def half_width(self) -> float:
        """Coordinate half-width of a mesh covering the X+ ball of radius ``R_mesh``."""
        return self.R_mesh / max(self.basis.conditioning, 1e-300)

    def flow_states(self, U, t: float) -> np.ndarray:
        return evolve(self.flow, self.op, self.nl, U, t).final

    def norm_minus(self, V) -> np.ndarray:
        return self.norms.minus(V)

    def norm_plus_coords(self, XI) -> np.ndarray:
        """``||F xi||_{X+}`` for coordinates in the context basis."""
        C = self.basis.projector.coords(self.basis.vectors)
        return self.norms.plus_coords(C @ np.asarray(XI).reshape(self.d, -1))

    def split_state(self, U):
        """``(xi, v)`` with ``P+ u = F xi`` and ``v = P- u``."""
        xi = self.basis.coords(U)
        return xi, U - self.basis.vectors @ xi


def make_context(kind: str, op: EllipticOperator, split: SpectralSplit, basis: SubspaceBasis,
                 nl: CutoffNonlinearity, dc: DichotomyConstants, norms: RenormedNorm,
                 cone: ConeParams, flow: SemiflowConfig, params: ManifoldParams,
                 delta_hat: float | None = None, norm_bounds=None, stable_gap: float | None = None
                 ) -> ManifoldContext:
    """Bundle everything the constructions need.

    ``delta_hat`` (and ``norm_bounds = (M1 ||P-||, M2 ||P+||)``) are taken
    from the limit problem when building perturbed members so that all members
    share one metric ball.
    """
    if kind not in ("unstable", "stable"):
        raise ConfigError(f"manifold kind must be 'unstable' or 'stable', got '{kind}'")
    if basis.d > 2:
        raise ConfigError(f"dim X+ = {basis.d} > 2 is not supported by the X+ mesh")
    if kind == "unstable" and basis.d == 0:
        raise NumericalError("unstable manifold needs dim X+ >= 1")
    R = params.R_mesh if params.R_mesh is not None else nl.delta / 3.0
    if kind == "unstable":
        d2 = params.delta2 if params.delta2 is not None else R
        d1 = params.delta1 if params.delta1 is not None else 2.0 * R
        if not d1 > d2:
            raise ConfigError(f"unstable patch needs delta1 > delta2, got {d1} <= {d2}")
    else:
        d1 = params.delta1 if params.delta1 is not None else R
        d2 = params.delta2 if params.delta2 is not None else 2.0 * R
        if not d1 < d2:
            raise ConfigError(f"stable patch needs delta1 < delta2, got {d1} >= {d2}")
    if d1 + d2 > nl.delta * (1 + 1e-12):
        logger.warning("delta1 + delta2 = %.3g exceeds the cutoff radius %.3g", d1 + d2, nl.delta)
    proj = basis.projector
    if norm_bounds is None:
        norm_bounds = (dc.M1 * proj.norm_minus, dc.M2 * proj.norm_plus)
    if delta_hat is None:
        delta_hat = min(d1 / norm_bounds[0], d2 / norm_bounds[1] if norm_bounds[1] > 0 else np.inf)
    # ten time constants of the X+/X- separation: a shooting error in xi shrinks by e^-10
    gap = stable_gap if stable_gap is not None else -split.stable_bound
    if np.isfinite(split.unstable_bound):
        gap += max(split.unstable_bound, 0.0)
    T_stab = params.T_stab if params.T_stab is not None else 10.0 / gap
    return ManifoldContext(kind, op, split, basis, nl, dc, norms, cone, flow, params,
                           float(R), float(d1), float(d2), float(delta_hat), float(T_stab))


# ---------------------------------------------------------------------------
# Lipschitz measurements


def graph_lip(g: GraphFunction, ctx: ManifoldContext) -> float:
    """Largest difference quotient over adjacent mesh nodes, in renormed norms."""
    a, b = g.adjacent_pairs()
    num = ctx.norm_minus(g.values[:, a] - g.values[:, b])
    X = g.nodes
    den = ctx.norm_plus_coords(X[:, a] - X[:, b])
    return float(np.max(num / den))


def lip_distance(g1: GraphFunction, g2: GraphFunction, ctx: ManifoldContext) -> float:
    """``sup_{w != 0} ||h2(w) - h1(w)||_{X-} / ||w||_{X+}`` over mesh nodes."""
    X = g1.nodes
    nz = np.any(X != 0, axis=0)
    num = ctx.norm_minus(g2.values[:, nz] - g1.values[:, nz])
    den = ctx.norm_plus_coords(X[:, nz])
    return float(np.max(num / den))


def secant_slope(g: GraphFunction, ctx: ManifoldContext, r: float, n_dir: int = 64) -> float:
    """``max_{||w||=r} ||h(w)||_{X-} / ||w||`` (L2 radius ``r`` in X+)."""
    F = ctx.basis.vectors
    if g.d == 1:
        dirs = np.array([[-1.0, 1.0]])
    else:
        th = np.linspace(0, 2 * np.pi, n_dir, endpoint=False)
        dirs = np.array([np.cos(th), np.sin(th)])
    scale = r / l2_norm(F @ dirs, ctx.h)
    XI = dirs * scale
    num = ctx.norm_minus(g(XI))
    return float(np.max(num / r))


# ---------------------------------------------------------------------------
# graph transform


def _reconstruct(targets, images, values, sources):
    """Interpolate scattered ``values`` at ``images`` onto ``targets``."""
    d = targets.shape[0]
    if d == 1:
        # the flow preserves the order of sources along the line
        order = np.argsort(sources[0], kind="stable")
        xs = images[0][order]
        if np.any(np.diff(xs) <= 0):
            raise NumericalError("graph-transform images are not monotone; interpolation degenerate")
        if targets[0].min() < xs[0] or targets[0].max() > xs[-1]:
            raise CoverageError("image of the graph does not cover the mesh; increase t_map or shrink R_mesh")
        W = multilinear_weights((xs,), targets)
        return values[:, order] @ W.toarray()
    tri = Delaunay(images.T)
    simp = tri.find_simplex(targets.T)
    if np.any(simp < 0):
        raise CoverageError("image of the graph does not cover the mesh; increase t_map or shrink R_mesh")
    T = tri.transform[simp]
    delta = targets.T - T[:, d]
    bary = np.einsum("kij,kj->ki", T[:, :d], delta)
    bary = np.hstack([bary, 1 - bary.sum(axis=1, keepdims=True)])
    verts = tri.simplices[simp]
    k = targets.shape[1]
    W = sp.csr_matrix((bary.ravel(), (verts.ravel(), np.repeat(np.arange(k), d + 1))),
                      shape=(images.shape[1], k))
    return values @ W.toarray()


def _sources(ctx: ManifoldContext, g: GraphFunction, t: float):
    """Pre-images of the mesh nodes under the linear X+ group, plus guard nodes."""
    B = ctx.basis.reduced_matrix()
    from scipy.linalg import expm

    back = expm(-B * t)
    X = g.nodes
    hw = ctx.half_width * ctx.params.guard
    if g.d == 1:
        guard = np.array([[-hw, hw]])
    else:
        th = np.linspace(0, 2 * np.pi, 32, endpoint=False)
        guard = hw * math.sqrt(2.0) * np.array([np.cos(th), np.sin(th)])
    S = back @ np.hstack([X, guard])
    return S


def graph_transform(g: GraphFunction, sched: FixedPointSchedule, ctx: ManifoldContext,
                    t: float | None = None, clamp: bool = True) -> GraphFunction:
    """One step ``graph(h~) = Phi_t(graph(h))`` reconstructed on the same mesh."""
    t = sched.t_map if t is None else t
    S = _sources(ctx, g, t)
    lim = np.array([ax[-1] for ax in g.axes])[:, None]
    inside = np.all(np.abs(S) <= lim, axis=0)
    Hs = np.zeros((g.values.shape[0], S.shape[1]))
    Hs[:, inside] = g(S[:, inside])
    if not np.all(inside):
        # guard sources beyond the mesh: clamp coordinates to the mesh boundary
        Hs[:, ~inside] = g(np.clip(S[:, ~inside], -lim, lim))
    U = ctx.basis.vectors @ S + Hs
    U1 = ctx.flow_states(U, t)
    xi1, v1 = ctx.split_state(U1)
    X = g.nodes
    values = _reconstruct(X, xi1, v1, S)
    values[:, g.zero_index] = 0.0
    out = GraphFunction(g.axes, values, 0.0)
    out.lip = graph_lip(out, ctx)
    if clamp and out.lip > 1.0 / ctx.cone.nu:
        out.values *= (1.0 / ctx.cone.nu) / out.lip
        out.lip = 1.0 / ctx.cone.nu
    return out


# ---------------------------------------------------------------------------
# patches


@dataclass(eq=False)
class ManifoldPatch:
    kind: str
    graph: object
    delta1: float
    delta2: float
    delta_hat: float
    samples: np.ndarray  # (n_samples, grid.size), zero-extended to D
    coords: np.ndarray  # (n_samples, c): X+ coordinates or (direction, radius)
    norms: np.ndarray
    meta: dict
    mask: DomainMask


def _meta(ctx: ManifoldContext, **extra) -> dict:
    dc = ctx.dichotomy
    m = dict(kind=ctx.kind, alpha=dc.alpha, beta=dc.beta, M1=dc.M1, M2=dc.M2, sigma=dc.sigma_decay,
             gamma=ctx.cone.gamma, mu=ctx.cone.mu, nu=ctx.cone.nu, epsilon=ctx.cone.epsilon,
             delta=ctx.nl.delta, delta1=ctx.delta1, delta2=ctx.delta2, delta_hat=ctx.delta_hat,
             R_mesh=ctx.R_mesh, d=ctx.d, n_active=ctx.op.n, label=ctx.mask.label,
             dt=ctx.flow.dt, scheme=ctx.flow.scheme)
    m.update(extra)
    return m


def unstable_samples(ctx: ManifoldContext, g: GraphFunction, points: int | None = None):
    """Points ``F xi + h(xi)`` on a uniform coordinate grid, kept if ``||u|| <= delta_hat``."""
    points = ctx.params.sample_points if points is None else points
    hw = min(ctx.delta_hat / max(ctx.basis.conditioning, 1e-300), g.axes[0][-1])
    axes = mesh_axes(g.d, hw, points)
    grids = np.meshgrid(*axes, indexing="ij")
    XI = np.array([a.ravel() for a in grids])
    U = ctx.basis.vectors @ XI + g(XI)
    nrm = l2_norm(U, ctx.h)
    keep = nrm <= ctx.delta_hat * (1 + 1e-12)
    return XI[:, keep], U[:, keep], nrm[keep]


def unstable_manifold(ctx: ManifoldContext, t_map: float | None = None, h0: GraphFunction | None = None,
                      schedule: FixedPointSchedule | None = None) -> ManifoldPatch:
    """Iterate the graph transform from ``h0 = 0`` to a fixed point."""
    if ctx.kind != "unstable":
        raise ConfigError("unstable_manifold needs an unstable-split context")
    p = ctx.params
    sched = schedule or make_schedule(ctx.dichotomy, ctx.cone, p.tol, p.m_max,
                                      t_map if t_map is not None else p.t_map)
    axes = mesh_axes(ctx.d, ctx.half_width, p.mesh_points)
    g = h0 if h0 is not None else zero_graph(axes, ctx.op.n)
    dists, ratios = [], []
    bad = 0
    converged = False
    for m in range(1, sched.m_max + 1):
        g_new = graph_transform(g, sched, ctx)
        dist = lip_distance(g, g_new, ctx)
        dists.append(dist)
        if len(dists) >= 2 and dists[-2] > 0:
            ratios.append(dist / dists[-2])
            bad = bad + 1 if ratios[-1] >= 1.0 else 0
            if bad >= 3:
                raise ConvergenceError(
                    f"graph transform not contracting: last ratios {ratios[-3:]}, K={sched.K:.3g}",
                    residuals=np.array(dists),
                )
        g = g_new
        if dist < sched.tol:
            converged = True
            break
    if not converged:
        raise ConvergenceError(f"graph transform did not reach tol={sched.tol:g} in {sched.m_max} iterations",
                               residuals=np.array(dists))
    iterations = len(dists)
    if iterations > sched.m0 + 3:
        logger.warning("graph transform used %d iterations; a-priori bound m0=%d", iterations, sched.m0)
    XI, U, nrm = unstable_samples(ctx, g)
    meta = _meta(ctx, K=sched.K, t_map=sched.t_map, m0=sched.m0, iterations=iterations,
                 tol=sched.tol, lip=g.lip, lip_distances=dists, ratios=ratios,
                 conditioning=ctx.basis.conditioning)
    return ManifoldPatch("unstable", g, ctx.delta1, ctx.delta2, ctx.delta_hat,
                         extend_by_zero(U, ctx.mask).T, XI.T, nrm, meta, ctx.mask)


# ---------------------------------------------------------------------------
# stable manifold by cone-exit shooting


def _exit_keys(ctx: ManifoldContext, V0, XI):
    """Cone-exit keys for starts ``v0 + F xi`` (columns).

    Key is the (interpolated) exit time, or ``T_stab + (1 - ratio) dt`` when
    the orbit stays in the cone up to ``T_stab``, where ``ratio`` is
    ``||w||_{X+} / (mu ||v||_{X-})`` at ``T_stab``.  Larger is better.
    """
    F = ctx.basis.vectors
    mu = ctx.cone.mu
    T = ctx.T_stab
    cfg = ctx.flow
    nsteps = max(1, math.ceil(T / cfg.dt - 1e-9))
    step = T / nsteps
    stride = ctx.params.cone_stride or (1 if ctx.norms.exact_l2 else 25)
    U = V0 + F @ XI
    k = U.shape[1]
    keys = np.full(k, np.nan)
    active = np.arange(k)

    def gap(U):
        xi, v = ctx.split_state(U)
        wn = ctx.norm_plus_coords(xi)
        vn = ctx.norm_minus(v)
        return wn - mu * vn, wn, vn

    g_prev, _, _ = gap(U)
    s_prev = 0
    f_prev = None
    for s in range(1, nsteps + 1):
        fu = modified_f(U, ctx.nl)
        if cfg.scheme == "cn-ab":
            ext = fu if f_prev is None else 1.5 * fu - 0.5 * f_prev
            lu, rhs = _cn_factors(ctx.op, step)
            U = lu.solve(rhs @ U + step * ext)
        else:
            U = _expeuler_step(ctx.op, U, fu, step)
        f_prev = fu
        if s % stride and s != nsteps:
            continue
        g_now, wn, vn = gap(U)
        out = g_now > 0
        if np.any(out):
            frac = np.clip(g_prev[out] / (g_prev[out] - g_now[out]), 0.0, 1.0)
            keys[active[out]] = (s_prev + frac * (s - s_prev)) * step
            stay = ~out
            U, f_prev, active, g_now = U[:, stay], f_prev[:, stay], active[stay], g_now[stay]
            wn, vn = wn[stay], vn[stay]
            if active.size == 0:
                break
        g_prev = g_now
        s_prev = s
    if active.size:
        ratio = wn / np.maximum(mu * vn, 1e-300)
        keys[active] = T + (1.0 - np.clip(ratio, 0.0, 1.0)) * step
    return keys


def _b_radius(ctx: ManifoldContext, V0) -> np.ndarray:
    """Coordinate half-width of ``B = {|xi| ||f||_{X+} <= mu ||v0||_{X-}}`` for d = 1."""
    fp = float(ctx.norm_plus_coords(np.ones((1, 1)))[0])
    return ctx.cone.mu * ctx.norm_minus(V0) / fp


def shoot_batch(V0, ctx: ManifoldContext):
    """Maximise the cone-exit time over ``B`` for each column of ``V0``.

    Returns ``(XI, keys)``: X+ coordinates of the maximisers and their keys.
    """
    if ctx.kind != "stable":
        raise ConfigError("stable shooting needs a stable-split context")
    V0 = np.asarray(V0, dtype=float).reshape(ctx.op.n, -1)
    k = V0.shape[1]
    d = ctx.d
    XI = np.zeros((d, k))
    keys = np.full(k, ctx.T_stab + 1.0)
    if d == 0 or k == 0:
        return XI, keys
    vn = ctx.norm_minus(V0)
    nz = vn > 0
    if not np.any(nz):
        return XI, keys
    V = V0[:, nz]
    tol = ctx.params.search_tol
    if d == 1:
        b = _b_radius(ctx, V)
        lo, hi = -b.copy(), b.copy()
        x1 = hi - GOLDEN * (hi - lo)
        x2 = lo + GOLDEN * (hi - lo)
        both = _exit_keys(ctx, np.hstack([V, V]), np.concatenate([x1, x2])[None, :])
        f1, f2 = both[: V.shape[1]], both[V.shape[1]:]
        n_iter = math.ceil(math.log(tol) / math.log(GOLDEN))
        for _ in range(n_iter):
            left = f1 >= f2  # maximiser in [lo, x2]
            hi = np.where(left, x2, hi)
            lo = np.where(left, lo, x1)
            newx = np.where(left, hi - GOLDEN * (hi - lo), lo + GOLDEN * (hi - lo))
            fn = _exit_keys(ctx, V, newx[None, :])
            x2, f2, x1, f1 = (np.where(left, x1, newx), np.where(left, f1, fn),
                              np.where(left, newx, x2), np.where(left, fn, f2))
        best = np.where(f1 >= f2, x1, x2)
        kb = np.maximum(f1, f2)
        XI[0, nz] = best
        keys[nz] = kb
        return XI, keys
    # d = 2: compass search inside B
    mu = ctx.cone.mu
    m = V.shape[1]
    x = np.zeros((2, m))
    fx = _exit_keys(ctx, V, x)
    bound = mu * vn[nz]
    radius = bound / max(ctx.basis.conditioning, 1e-300)
    step = radius / 2.0
    polls = np.array([[1, -1, 0, 0], [0, 0, 1, -1]], dtype=float)
    while np.any(step > tol * radius):
        cand = (x[:, :, None] + polls[:, None, :] * step[None, :, None])  # (2, m, 4)
        C = cand.reshape(2, -1)
        Vr = np.repeat(V, 4, axis=1)
        inB = ctx.norm_plus_coords(C) <= np.repeat(bound, 4)
        fc = np.full(C.shape[1], -np.inf)
        if np.any(inB):
            fc[inB] = _exit_keys(ctx, Vr[:, inB], C[:, inB])
        fc = fc.reshape(m, 4)
        j = np.argmax(fc, axis=1)
        better = fc[np.arange(m), j] > fx
        x[:, better] = cand[:, better, j[better]] if np.any(better) else x[:, better]
        fx[better] = fc[better, j[better]]
        step = np.where(better, step, step / 2.0)
    XI[:, nz] = x
    keys[nz] = fx
    return XI, keys


def stable_shoot(v0, ctx: ManifoldContext) -> np.ndarray:
    """``h-(v0)`` as an X+ nodal vector."""
    XI, keys = shoot_batch(np.asarray(v0, dtype=float)[:, None], ctx)
    if keys[0] < ctx.T_stab:
        raise NumericalError(
            f"no candidate stays in the cone up to T_stab={ctx.T_stab:.3g}; shrink ||v0||"
        )
    return ctx.basis.vectors @ XI[:, 0]


def probe_fields(grid, count: int, seed: int) -> np.ndarray:
    """Fixed smooth random fields on the whole box (full-grid columns)."""
    return random_directions(full_mask(grid), count, seed, "smooth")


def stable_directions(ctx: ManifoldContext) -> np.ndarray:
    """``P- (probe restricted to Omega)`` normalised in ``||.||_{X-}``."""
    P = probe_fields(ctx.mask.grid, ctx.params.directions, ctx.params.probe_seed)
    E = ctx.basis.projector.minus(restrict_to(P, ctx.mask))
    return E / ctx.norm_minus(E)


def stable_radii(ctx: ManifoldContext) -> np.ndarray:
    n = ctx.params.radial_points
    return 0.95 * min(ctx.delta_hat, ctx.delta1) * np.arange(1, n + 1) / n


@dataclass(eq=False)
class StableGraph:
    """Sampled ``h- : X- -> X+``: starts ``v0`` and X+ coordinates of ``h-(v0)``."""

    V0: np.ndarray
    XI: np.ndarray
    keys: np.ndarray
    lip: float = 0.0


def stable_lip(ctx: ManifoldContext, V0, XI) -> float:
    """Largest ``||h(v_a) - h(v_b)||_{X+} / ||v_a - v_b||_{X-}`` over sample pairs (origin included)."""
    V = np.hstack([np.zeros((V0.shape[0], 1)), V0])
    X = np.hstack([np.zeros((XI.shape[0], 1)), XI])
    a, b = np.triu_indices(V.shape[1], 1)
    num = ctx.norm_plus_coords(X[:, a] - X[:, b])
    den = ctx.norm_minus(V[:, a] - V[:, b])
    return float(np.max(num / den))


def stable_manifold(ctx: ManifoldContext, V0=None, coords=None) -> ManifoldPatch:
    """Sample ``h-`` on ``rho * e`` for random X- directions ``e`` and radii ``rho``."""
    if ctx.kind != "stable":
        raise ConfigError("stable_manifold needs a stable-split context")
    if V0 is None:
        E = stable_directions(ctx)
        radii = stable_radii(ctx)
        V0 = np.hstack([E * r for r in radii])
        coords = np.array([(j, r) for r in radii for j in range(E.shape[1])])
    coords = np.zeros((V0.shape[1], 2)) if coords is None else np.asarray(coords)
    XI, keys = shoot_batch(V0, ctx)
    if np.any(keys < ctx.T_stab):
        worst = int(np.argmin(keys))
        raise NumericalError(
            f"stable shooting: {int(np.sum(keys < ctx.T_stab))} start(s) leave the cone before "
            f"T_stab={ctx.T_stab:.3g} (worst key {keys[worst]:.3g}); shrink the sample radii"
        )
    U = V0 + ctx.basis.vectors @ XI
    lip = stable_lip(ctx, V0, XI)
    if lip > 1.2 * ctx.cone.mu:
        logger.warning("stable graph Lipschitz constant %.3g exceeds 1.2 mu", lip)
    U = np.hstack([np.zeros((ctx.op.n, 1)), U])
    coords = np.vstack([[-1, 0.0], coords])
    nrm = l2_norm(U, ctx.h)
    keep = nrm <= ctx.delta_hat * (1 + 1e-12)
    graph = StableGraph(V0, XI, keys, lip)
    meta = _meta(ctx, T_stab=ctx.T_stab, search_tol=ctx.params.search_tol, lip=lip,
                 directions=ctx.params.directions, radial_points=ctx.params.radial_points,
                 dropped=int(np.sum(~keep)))
    return ManifoldPatch("stable", graph, ctx.delta1, ctx.delta2, ctx.delta_hat,
                         extend_by_zero(U[:, keep], ctx.mask).T, coords[keep], nrm[keep], meta, ctx.mask)


# ---------------------------------------------------------------------------
# persistence


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return x


def write_patch(patch: ManifoldPatch, directory, stem: str) -> dict:
    """CSV (one row per sample), binary sidecar (float64, row-major) and JSON metadata."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if patch.kind == "unstable":
        head = [f"xi_{j + 1}" for j in range(patch.coords.shape[1])]
    else:
        head = ["direction", "radius"]
    lines = [",".join(["index"] + head + ["offset", "norm_l2"])]
    size = patch.samples.shape[1]
    for i, (c, nv) in enumerate(zip(patch.coords, patch.norms)):
        cells = [f"{int(c[0])}" if patch.kind == "stable" else f"{c[0]:.17g}"]
        cells += [f"{x:.17g}" for x in c[1:]]
        lines.append(",".join([str(i)] + cells + [str(i * size * 8), f"{nv:.17g}"]))
    paths = {"csv": directory / f"{stem}.csv", "bin": directory / f"{stem}.bin",
             "json": directory / f"{stem}.json"}
    paths["csv"].write_text("\n".join(lines) + "\n", newline="\n")
    np.ascontiguousarray(patch.samples, dtype="<f8").tofile(paths["bin"])
    meta = dict(patch.meta, n_samples=int(patch.samples.shape[0]), grid_size=int(size),
                sidecar=paths["bin"].name, dtype="float64-le", layout="row-major")
    paths["json"].write_text(json.dumps(_jsonable(meta), indent=2, sort_keys=True) + "\n", newline="\n")
    return paths


def read_samples(bin_path, grid_size: int) -> np.ndarray:
    return np.fromfile(bin_path, dtype="<f8").reshape(-1, grid_size)
