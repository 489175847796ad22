import dataclasses
import math

import numpy as np
import pytest

from mperturb.errors import ConfigError, InfeasibleParametersError
from mperturb.geometry import l2_norm
from mperturb.manifolds import (ConeParams, GraphFunction, ManifoldParams, _exit_keys, _b_radius, cone_constraints,
                                cone_membership, contraction_constant, graph_lip, graph_transform, lip_distance,
                                make_schedule, mesh_axes, multilinear_weights, read_samples, secant_slope,
                                select_cone_params, solve_t_map, stable_manifold, stable_shoot, unstable_manifold,
                                write_patch, zero_graph)
from mperturb.problem import limit_context


def test_cone_example():
    cone = select_cone_params((0.5, 1.0), 0.05)
    assert (cone.mu, cone.nu) == (0.5, 2.0)
    assert 0.05 < 0.5 / 6
    assert cone.gamma == pytest.approx(-0.75, abs=1e-12)
    assert -0.9 < cone.gamma < -0.6


def test_cone_eps_zero():
    for mu in (0.5, 0.25, 0.1):
        for nu in (2.0, 4.0, 10.0):
            ok, lo, hi, _ = cone_constraints(0.5, 1.0, 0.0, mu, nu)
            assert ok and (lo, hi) == (-1.0, -0.5)
    assert select_cone_params((0.5, 1.0), 0.0).gamma == pytest.approx(-0.75)


def test_cone_infeasible():
    with pytest.raises(InfeasibleParametersError, match="0.125"):
        select_cone_params((0.5, 1.0), 0.2)
    cone = select_cone_params((0.5, 1.0), 0.2, raise_on_fail=False)
    assert not cone.feasible and "beta-alpha" in cone.violated


def test_cone_membership():
    assert cone_membership(1.0, 2.0, 1.0)
    assert not cone_membership(2.0, 1.0, 1.0)
    assert cone_membership(1.5, 3.0, 2.0)  # boundary belongs to the closed cone
    with pytest.raises(ValueError):
        cone_membership(1.0, 1.0, 0.0)


def test_schedule_oracle():
    dc = type("DC", (), {"alpha": 0.5, "beta": 1.0})()
    cone = ConeParams(0.5, 2.0, -0.75, 0.05)
    t = solve_t_map(dc, cone)
    rate = 0.5 - 1.0 + 0.05 * (2 + 0.5 + 0.5)
    assert 2 / 1.5 * math.exp(rate * t) == pytest.approx(0.5, rel=1e-12)
    assert contraction_constant(dc, cone, t) == pytest.approx(0.5, rel=1e-12)
    sched = make_schedule(dc, cone, tol=1e-8)
    # smallest m with K^m * (2/nu) / (1 - K) <= tol
    m = 1
    while 0.5**m * 1.0 / 0.5 > 1e-8:
        m += 1
    assert sched.m0 == m
    with pytest.raises(InfeasibleParametersError):
        make_schedule(dc, cone, t_map=1e-6)


def test_mesh_and_interpolation():
    ax = mesh_axes(1, 2.0, 10)
    assert len(ax[0]) == 11 and ax[0][5] == 0.0
    g = GraphFunction(ax, np.vstack([ax[0], ax[0] ** 2]), 0.0)
    q = np.array([[0.3, -1.1]])
    vals = g(q)
    assert np.allclose(vals[0], q[0])  # linear data reproduced exactly
    ax2 = mesh_axes(2, 1.0, 5)
    W = multilinear_weights(ax2, np.array([[0.1, -0.7], [0.2, 0.9]]))
    assert np.allclose(np.asarray(W.sum(axis=0)).ravel(), 1.0)
    with pytest.raises(ConfigError):
        mesh_axes(3, 1.0, 5)


@pytest.fixture(scope="module")
def linear_ctx(dumbbell_problem, dumbbell_family):
    pb = dataclasses.replace(dumbbell_problem, nonlinearity="zero")
    return limit_context(pb, dumbbell_family.limit, "unstable")[0]


@pytest.fixture(scope="module")
def linear_stable_ctx(dumbbell_problem, dumbbell_family):
    pb = dataclasses.replace(dumbbell_problem, nonlinearity="zero",
                             manifold=ManifoldParams(directions=4, radial_points=2))
    return limit_context(pb, dumbbell_family.limit, "stable")[0]


def test_linear_graph_transform_zero(linear_ctx):
    sched = make_schedule(linear_ctx.dichotomy, linear_ctx.cone)
    axes = mesh_axes(1, linear_ctx.half_width, 21)
    out = graph_transform(zero_graph(axes, linear_ctx.op.n), sched, linear_ctx)
    assert np.max(np.abs(out.values)) <= 1e-14 * linear_ctx.half_width
    assert not out.values[:, out.zero_index].any()


def test_linear_unstable_manifold(linear_ctx):
    patch = unstable_manifold(linear_ctx)
    assert patch.meta["lip"] <= 1e-8
    # the patch is the X+ ball: every sample is a multiple of the basis vector
    f = linear_ctx.basis.vectors[:, 0]
    U = patch.samples[:, linear_ctx.mask.indices]
    resid = U - np.outer(U @ f / (f @ f), f)
    assert np.max(np.abs(resid)) <= 1e-8 * np.max(np.abs(U))


def random_lipschitz_graph(ctx, axes, seed, lip):
    rng = np.random.default_rng(seed)
    P = ctx.basis.projector
    E = P.minus(rng.standard_normal((ctx.op.n, 2)))
    x = axes[0] / axes[0][-1]
    vals = np.outer(E[:, 0], x * x) + np.outer(E[:, 1], np.sin(3 * x) * x)
    g = GraphFunction(axes, vals, 0.0)
    g.values *= lip / graph_lip(g, ctx)
    g.lip = lip
    return g


def test_graph_transform_contracts(unstable_ctx):
    ctx = unstable_ctx
    sched = make_schedule(ctx.dichotomy, ctx.cone)
    axes = mesh_axes(1, ctx.half_width, 41)
    for seed in range(3):
        g1 = random_lipschitz_graph(ctx, axes, seed, 0.2 / ctx.cone.nu)
        g2 = random_lipschitz_graph(ctx, axes, seed + 10, 0.4 / ctx.cone.nu)
        before = lip_distance(g1, g2, ctx)
        after = lip_distance(graph_transform(g1, sched, ctx, clamp=False),
                             graph_transform(g2, sched, ctx, clamp=False), ctx)
        assert after <= 1.1 * sched.K * before
        t = graph_transform(g2, sched, ctx)
        assert not t.values[:, t.zero_index].any()


def test_unstable_manifold_cubic(unstable_ctx):
    patch = unstable_manifold(unstable_ctx)
    m = patch.meta
    d = m["lip_distances"]
    for k in range(1, len(d)):
        assert d[k] <= 1.1 * m["K"] ** k * d[0]
    assert m["iterations"] <= m["m0"] + 3
    slope_small = secant_slope(patch.graph, unstable_ctx, unstable_ctx.R_mesh / 4)
    slope_big = secant_slope(patch.graph, unstable_ctx, unstable_ctx.R_mesh)
    assert 0 < slope_small <= 0.6 * slope_big
    assert np.all(patch.norms <= unstable_ctx.delta_hat * (1 + 1e-12))


def test_patch_roundtrip(unstable_ctx, tmp_path):
    patch = unstable_manifold(unstable_ctx)
    paths = write_patch(patch, tmp_path, "p")
    back = read_samples(paths["bin"], patch.samples.shape[1])
    assert np.array_equal(back, patch.samples)
    lines = paths["csv"].read_text().splitlines()
    assert lines[0] == "index,xi_1,offset,norm_l2" and len(lines) == patch.samples.shape[0] + 1


def test_stable_linear(linear_stable_ctx):
    ctx = linear_stable_ctx
    patch = stable_manifold(ctx)
    assert np.all(np.abs(patch.graph.XI) * l2_norm(ctx.basis.vectors, ctx.h) <= 1e-8)
    assert not stable_shoot(np.zeros(ctx.op.n), ctx).any()


@pytest.fixture(scope="module")
def small_stable_ctx(dumbbell_problem, dumbbell_family):
    pb = dataclasses.replace(dumbbell_problem, manifold=ManifoldParams(directions=4, radial_points=2))
    return limit_context(pb, dumbbell_family.limit, "stable")[0]


def test_stable_manifold_cone_and_origin(small_stable_ctx):
    ctx = small_stable_ctx
    patch = stable_manifold(ctx)
    gr = patch.graph
    assert np.all(ctx.norm_plus_coords(gr.XI) <= ctx.cone.mu * ctx.norm_minus(gr.V0))
    assert not patch.samples[0].any() and tuple(patch.coords[0]) == (-1, 0)
    assert np.all(gr.keys >= ctx.T_stab)


def test_shooting_matches_grid_scan(small_stable_ctx):
    ctx = small_stable_ctx
    P = ctx.basis.projector
    rng = np.random.default_rng(3)
    v0 = P.minus(rng.standard_normal(ctx.op.n))
    v0 *= 0.3 * ctx.delta_hat / l2_norm(v0, ctx.h)
    b = float(_b_radius(ctx, v0[:, None])[0])
    grid = np.linspace(-b, b, 2001)  # resolution 1e-3 of the width of B
    keys = _exit_keys(ctx, np.repeat(v0[:, None], grid.size, axis=1), grid[None, :])
    k = int(np.argmax(keys))
    assert 0 < k < grid.size - 1
    # unimodal: exit time rises to the peak and falls after it
    assert np.all(np.diff(keys[: k + 1]) >= -1e-12) and np.all(np.diff(keys[k:]) <= 1e-12)
    w = stable_shoot(v0, ctx)
    xi = ctx.basis.coords(w)[0]
    assert abs(xi - grid[k]) <= 2 * (grid[1] - grid[0])


def test_stable_kind_checked(unstable_ctx):
    with pytest.raises(ConfigError):
        stable_manifold(unstable_ctx)
