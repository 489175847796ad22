import numpy as np
import pytest

from mperturb.geometry import GridSpec, build_family, full_mask
from mperturb.operators import assemble, coefficient_preset
from mperturb.problem import Problem, limit_context


@pytest.fixture(scope="session")
def grid15():
    return GridSpec(15)


@pytest.fixture(scope="session")
def grid31():
    return GridSpec(31)


@pytest.fixture(scope="session")
def laplacian63():
    g = GridSpec(63)
    return assemble(full_mask(g), coefficient_preset("constant", g))


@pytest.fixture(scope="session")
def shifted63():
    """Laplacian with c0 = -30: one unstable eigenvalue 2 pi^2 - 30 < 0 flipped to 30 - 2 pi^2 > 0."""
    g = GridSpec(63)
    return assemble(full_mask(g), coefficient_preset("constant", g, c0=-30.0))


@pytest.fixture(scope="session")
def dumbbell_problem(grid31):
    return Problem(grid31, coefficient_params=dict(c0=-106.0), sigma_fraction=0.3)


@pytest.fixture(scope="session")
def dumbbell_family(grid31):
    return build_family("dumbbell", 4, grid31)


@pytest.fixture(scope="session")
def unstable_ctx(dumbbell_problem, dumbbell_family):
    return limit_context(dumbbell_problem, dumbbell_family.limit, "unstable")[0]


@pytest.fixture(scope="session")
def stable_ctx(dumbbell_problem, dumbbell_family):
    return limit_context(dumbbell_problem, dumbbell_family.limit, "stable")[0]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
