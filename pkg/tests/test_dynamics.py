import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mperturb.errors import ConfigError, NumericalError
from mperturb.geometry import GridSpec, build_family, full_mask, l2_norm
from mperturb.operators import assemble, constant_coefficients
from mperturb.dynamics import (CutoffNonlinearity, RenormedNorm, SemiflowConfig, calibrate, cutoff_factor,
                               dichotomy_exponents, estimate_lipschitz, evolve, fit_dichotomy,
                               group_action_plus, modified_f, random_directions,
                               renormed_norm, semigroup_action, trajectory_rows)
from mperturb.spectral import build_projector, compute_split


def sine_mode(grid, j=1, k=1):
    X, Y = grid.coordinates()
    return (np.sin(j * math.pi * X) * np.sin(k * math.pi * Y)).ravel()


@pytest.fixture(scope="module")
def shifted31():
    g = GridSpec(31)
    op = assemble(full_mask(g), constant_coefficients(g, c0=-30.0))
    split = compute_split(op)
    return op, split


def test_cutoff_branches():
    d = 0.2
    assert cutoff_factor(d / 2, d) == 1.0
    assert cutoff_factor(1.5 * d, d) == pytest.approx(0.5)
    assert cutoff_factor(3 * d, d) == 0.0
    assert np.array_equal(cutoff_factor(np.array([0.0, d, 2 * d]), d), [1.0, 1.0, 0.0])
    with pytest.raises(ValueError):
        cutoff_factor(1.0, 0.0)


def test_modified_f_values(grid15):
    h = grid15.h
    nl = CutoffNonlinearity("cubic", 2.0, 0.1, h)
    assert not modified_f(np.zeros(grid15.size), nl).any()
    u = random_directions(full_mask(grid15), 1, 0)[:, 0]
    assert not modified_f(2.01 * 0.1 * u, nl).any()
    small = 0.05 * u
    assert np.array_equal(modified_f(small, nl), 2.0 * small**3)
    # middle branch scales by 2 - r/delta
    mid = 0.15 * u
    assert np.allclose(modified_f(mid, nl), 0.5 * 2.0 * mid**3, rtol=1e-12)


def test_unknown_preset(grid15):
    with pytest.raises(ConfigError):
        CutoffNonlinearity("quartic", 1.0, 0.1, grid15.h)


def test_lipschitz_zero(grid15):
    nl = CutoffNonlinearity("zero", 1.0, 0.1, grid15.h)
    assert estimate_lipschitz(nl, full_mask(grid15), 0.3) == 0.0


def test_lipschitz_cubic_homogeneity():
    g = GridSpec(31)
    mask = full_mask(g)
    nl = CutoffNonlinearity("cubic", 1.0, 0.05, g.h)
    top = 8 * nl.delta
    radii = [top * 2.0 ** (-k / 4) for k in (12, 16, 20, 24)]  # ladder rungs, halving
    eps = [estimate_lipschitz(nl, mask, r, modified=False) for r in radii]
    for a, b in zip(eps, eps[1:]):
        assert b / a == pytest.approx(0.25, rel=1e-9)
    # the modified function agrees inside the cutoff ball
    eps_mod = [estimate_lipschitz(nl, mask, r) for r in radii[1:]]
    for a, b in zip(eps_mod, eps_mod[1:]):
        assert b / a <= 0.3


@settings(max_examples=25, deadline=None)
@given(st.floats(1e-3, 0.5), st.floats(1.0, 4.0))
def test_lipschitz_monotone(r, factor):
    g = GridSpec(11)
    nl = CutoffNonlinearity("saturating", 3.0, 0.05, g.h)
    mask = full_mask(g)
    assert estimate_lipschitz(nl, mask, r, samples=6) <= estimate_lipschitz(nl, mask, r * factor, samples=6)


def test_calibrate_sets_constants(grid15):
    nl = calibrate(CutoffNonlinearity("cubic", 1.0, 0.1, grid15.h), full_mask(grid15), 8, 0)
    assert nl.epsilon > 0 and nl.local_lipschitz > 0
    assert nl.eta == pytest.approx(12 * nl.local_lipschitz)


def test_semigroup_basic(laplacian63, rng):
    g = laplacian63.mask.grid
    v = rng.standard_normal(g.size)
    assert np.array_equal(semigroup_action(laplacian63, v, 0.0), v)
    w = rng.standard_normal(g.size)
    lhs = semigroup_action(laplacian63, v + w, 0.01)
    rhs = semigroup_action(laplacian63, v, 0.01) + semigroup_action(laplacian63, w, 0.01)
    assert np.allclose(lhs, rhs, rtol=0, atol=1e-12 * np.abs(lhs).max())
    with pytest.raises(ValueError):
        semigroup_action(laplacian63, v, -1.0)


def test_semigroup_eigenfunction_decay(laplacian63):
    u = sine_mode(laplacian63.mask.grid)
    out = semigroup_action(laplacian63, u, 0.05, dt=1e-4)
    assert np.allclose(out, math.exp(-2 * math.pi**2 * 0.05) * u, rtol=0, atol=0.01 * math.exp(-2 * math.pi**2 * 0.05))


def test_group_action_plus(shifted31):
    op, split = shifted31
    P = build_projector(split, "unstable", op)
    xi = np.array([0.7])
    assert np.allclose(group_action_plus(P, xi, 0.0), P.R @ xi)
    lam = split.sigma_u[0].value.real
    for t in (-0.3, 0.2):
        assert group_action_plus(P, xi, t, coords=True)[0] == pytest.approx(math.exp(lam * t) * 0.7, rel=1e-12)
    # cross-check against the flow of the full linear operator
    w = P.R @ xi
    via_flow = P.plus(semigroup_action(op, w, 0.1, dt=1e-4))
    assert np.allclose(group_action_plus(P, xi, 0.1), via_flow, rtol=1e-6, atol=0)


def test_fit_dichotomy_unstable_selfadjoint(shifted31):
    op, split = shifted31
    P = build_projector(split, "unstable", op)
    dc, rn = fit_dichotomy(op, P, split, n_vectors=20)
    lam_u = split.sigma_u[0].value.real
    assert lam_u == pytest.approx(30 - 2 * math.pi**2, rel=0.01)
    assert 0 < dc.beta < lam_u and 0 < dc.alpha < dc.beta
    assert dc.M1 <= 1.2 and dc.M2 <= 1.2
    assert rn.exact_l2


def test_fit_dichotomy_stable(shifted31):
    op, split = shifted31
    P = build_projector(split, "stable", op)
    dc, _ = fit_dichotomy(op, P, split, n_vectors=10)
    assert dc.alpha == -dc.sigma_decay and dc.alpha < dc.beta < 0
    with pytest.raises(ConfigError):
        dichotomy_exponents(split, "stable", 0.0)


def test_renormed_norm_eigenvector_at_rate(shifted31):
    op, split = shifted31
    P = build_projector(split, "unstable", op)
    second = split.sigma_s[0]
    v = second.right.real
    # weight exactly matches the decay rate: the weighted curve is constant
    rn = RenormedNorm(op, P, second.value.real, 5.0, 1e-3, minus_rate=second.value.real, plus_rate=split.sigma_u[0].value.real)
    assert rn.minus(v, force_flow=True) == pytest.approx(l2_norm(v, op.h), rel=1e-6)
    assert renormed_norm(rn, np.zeros(op.n), "minus") == 0.0
    with pytest.raises(ValueError):
        renormed_norm(rn, v, "sideways")


def test_renormed_norm_sandwich_nonnormal(rng):
    g = GridSpec(21)
    mask = build_family("dumbbell", 1, g).members[1]
    op = assemble(mask, constant_coefficients(g, drift=(3.0, 1.0), c0=-106.0))
    split = compute_split(op)
    P = build_projector(split, "unstable", op)
    dc, rn = fit_dichotomy(op, P, split, n_vectors=30)
    assert not rn.exact_l2
    V = P.minus(rng.standard_normal((op.n, 10)))
    r = rn.minus(V) / l2_norm(V, op.h)
    assert np.all(r >= 1 - 1e-12) and np.all(r <= dc.M1)
    XI = rng.standard_normal((P.d, 10))
    rp = rn.plus_coords(XI) / l2_norm(P.R @ XI, op.h)
    assert np.all(rp >= 1 - 1e-12) and np.all(rp <= dc.M2)


def test_evolve_linear_and_zero(shifted31):
    op, _ = shifted31
    g = op.mask.grid
    nl = CutoffNonlinearity("zero", 0.0, 0.1, g.h)
    cfg = SemiflowConfig(dt=1e-3)
    u0 = sine_mode(g, 1, 2) * 0.01
    out = evolve(cfg, op, nl, u0, 0.05).final
    assert np.allclose(out, semigroup_action(op, u0, 0.05, dt=1e-3), rtol=0, atol=1e-14)
    cubic = CutoffNonlinearity("cubic", 1.0, 0.1, g.h)
    assert not evolve(cfg, op, cubic, np.zeros(op.n), 0.05).final.any()


def test_evolve_sampling_and_rows(shifted31):
    op, split = shifted31
    g = op.mask.grid
    P = build_projector(split, "unstable", op)
    nl = CutoffNonlinearity("cubic", 1.0, 0.1, g.h)
    traj = evolve(SemiflowConfig(dt=1e-3), op, nl, 0.01 * sine_mode(g), 0.01, sample_times=[0.0, 0.005, 0.01])
    assert np.allclose(traj.times, [0, 0.005, 0.01])
    rows = trajectory_rows(traj, P)
    assert len(rows) == 3 and rows[0][1] == pytest.approx(0.01 * l2_norm(sine_mode(g), g.h))


def self_convergence(scheme, steps, ref_steps):
    """Error ratios under dt halving against a fine same-scheme reference."""
    g = GridSpec(31)
    op = assemble(full_mask(g), constant_coefficients(g))
    nl = CutoffNonlinearity("cubic", 10.0, 10.0, g.h)
    X, Y = g.coordinates()
    u0 = (np.sin(math.pi * X) * np.sin(math.pi * Y)).ravel()
    T = 0.2
    ref = evolve(SemiflowConfig(T / ref_steps, scheme), op, nl, u0, T).final
    errs = [l2_norm(evolve(SemiflowConfig(T / n, scheme), op, nl, u0, T).final - ref, g.h) for n in steps]
    return [a / b for a, b in zip(errs, errs[1:])]


def test_cn_ab_second_order():
    assert all(3.2 <= r <= 4.8 for r in self_convergence("cn-ab", (20, 40, 80, 160), 3200))


def test_exp_euler_first_order():
    assert all(1.6 <= r <= 2.4 for r in self_convergence("exp-euler", (20, 40, 80), 640))


def test_semiflow_config_validation():
    with pytest.raises(ConfigError):
        SemiflowConfig(dt=0.0)
    with pytest.raises(ConfigError):
        SemiflowConfig(scheme="rk4")


def test_divergence_guard(grid15):
    op = assemble(full_mask(grid15), constant_coefficients(grid15))
    nl = CutoffNonlinearity("cubic", 1e6, 1e3, grid15.h)
    with pytest.raises(NumericalError):
        evolve(SemiflowConfig(dt=0.05, scheme="cn-ab"), op, nl, 10 * sine_mode(grid15), 5.0)
