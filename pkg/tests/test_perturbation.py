import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mperturb.geometry import GridSpec, build_family
from mperturb.manifolds import ManifoldParams
from mperturb.perturbation import (basis_alignment, lower_semidistance, sweep, symmetric_difference_measure,
                                   upper_semidistance, write_report)
from mperturb.problem import Problem


def brute_upper(A, B, h=1.0):
    best = 0.0
    for a in A:
        best = max(best, min(h * float(np.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))) for b in B))
    return best


def test_semidistance_basics():
    u, v = np.array([0.0, 0.0, 1.0]), np.array([3.0, 4.0, 1.0])
    assert upper_semidistance(v, u) == 5.0
    assert upper_semidistance(v, u, h=0.5) == 2.5
    S = np.random.default_rng(0).standard_normal((6, 4))
    assert upper_semidistance(S, S) == 0.0 and lower_semidistance(S, S) == 0.0
    with pytest.raises(ValueError):
        upper_semidistance(np.zeros((0, 4)), S)
    with pytest.raises(ValueError):
        upper_semidistance(np.zeros((2, 3)), S)


def test_three_point_sets():
    A = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 5.0]])
    B = np.array([[0.0, 1.0], [2.0, 2.0], [9.0, 9.0]])
    # nearest in B: (0,0)->1, (2,0)->2, (0,5)->sqrt(13)
    assert upper_semidistance(A, B) == pytest.approx(np.sqrt(13.0))
    assert upper_semidistance(A, B) == pytest.approx(brute_upper(A, B))


def test_lower_containment_and_asymmetry():
    Sn = np.array([[0.0], [1.0], [10.0]])
    S = np.array([[0.0], [1.0]])
    assert lower_semidistance(S, Sn) == 0.0  # S inside S_n
    assert upper_semidistance(Sn, S) == 9.0  # extra point of S_n is far
    assert upper_semidistance(Sn, S) != lower_semidistance(S, Sn)


@settings(max_examples=60, deadline=None)
@given(arrays(float, (4, 3), elements=st.floats(-5, 5)), arrays(float, (5, 3), elements=st.floats(-5, 5)))
def test_semidistance_bruteforce(A, B):
    assert upper_semidistance(A, B) == pytest.approx(brute_upper(A, B), abs=1e-12)
    assert lower_semidistance(A, B) == pytest.approx(brute_upper(A, B), abs=1e-12)
    # triangle-type bound through a shared third set
    C = np.vstack([A, B])
    assert upper_semidistance(A, C) == 0.0


def test_symmetric_difference():
    g = GridSpec(63)
    fam = build_family("fingers", 3, g)
    vals = [symmetric_difference_measure(m, fam.limit) for _, m in fam]
    assert vals[0] == vals[1] == vals[2]
    assert vals[0] == (fam.members[1].n_active - fam.limit.n_active) * g.h**2


@pytest.fixture(scope="module")
def fixed_sweep():
    g = GridSpec(31)
    pb = Problem(g, coefficient_params=dict(c0=-30.0), manifold=ManifoldParams(sample_points=41))
    return sweep(build_family("fixed", 2, g), pb, "unstable")


def test_fixed_family_zero(fixed_sweep, tmp_path):
    rep = fixed_sweep.report
    for r in rep.records:
        assert r["upper"] <= 1e-12 and r["lower"] <= 1e-12 and r["gap_u"] <= 1e-12
        assert r["measure_gap"] == 0.0
    rows = basis_alignment(fixed_sweep)
    assert max(v for _, _, v in rows) <= 1e-12
    zero = basis_alignment(fixed_sweep, probes=np.zeros((31 * 31, 2)))
    assert all(v == 0.0 for _, _, v in zero)
    paths = write_report(rep, tmp_path, "t")
    assert paths["csv"].name == "fixed_unstable_t.csv"
    head = paths["csv"].read_text().splitlines()[0]
    assert head == "n,upper,lower,gap_u,eig_err_1,eig_err_2,eig_err_3,measure_gap,flags"
    meta = json.loads(paths["json"].read_text())
    assert set(meta["params"]) >= {"alpha", "beta", "gamma", "mu", "nu", "epsilon", "delta_hat"}


@pytest.fixture(scope="module")
def dumbbell_sweep(dumbbell_problem, dumbbell_family):
    pb = dataclasses.replace(dumbbell_problem, manifold=ManifoldParams(sample_points=81))
    return sweep(dumbbell_family, pb, "unstable")


def test_dumbbell_unstable_trend(dumbbell_sweep):
    rep = dumbbell_sweep.report
    assert not rep.rejected and not rep.flags
    up, lo, gap = rep.column("upper"), rep.column("lower"), rep.column("gap_u")
    for seq in (up, lo, gap):
        assert np.all(np.diff(seq) < 0)
    err1 = np.array([r["eig_err"][0] for r in rep.records])
    assert np.all(np.diff(err1) < 0)


def test_basis_alignment_decreasing(dumbbell_sweep):
    rows = np.array(basis_alignment(dumbbell_sweep))
    for probe in range(10):
        seq = rows[rows[:, 1] == probe][:, 2]
        assert np.all(np.diff(seq) < 0)


@pytest.mark.slow
def test_fingers_stable_flag():
    g = GridSpec(31)
    fam = build_family("fingers", 2, g)
    pb = Problem(g, coefficient_params=dict(c0=-50.87), sigma_fraction=0.9,
                 manifold=ManifoldParams(directions=4, radial_points=2))
    res = sweep(fam, pb, "stable")
    assert "hypothesis-unmet:measure-convergence" in res.report.flags
    mg = res.report.column("measure_gap")
    assert mg[0] == mg[1] > 0
    assert all("hypothesis-unmet" in r["flags"] for r in res.report.records)
