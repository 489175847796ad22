"""Problem definition and the geometry -> operator -> spectrum -> context pipeline.

The limit domain fixes every parameter (alpha, beta, gamma, mu, nu, epsilon,
delta_hat); perturbed members reuse them unchanged.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .dynamics import (CutoffNonlinearity, SemiflowConfig, calibrate, default_dt, fit_dichotomy,
                       make_renormed_norm)
from .errors import HyperbolicityError, InfeasibleParametersError, MperturbError, NumericalError
from .geometry import DomainMask, GridSpec
from .manifolds import ManifoldContext, ManifoldParams, make_context, select_cone_params
from .operators import EllipticOperator, assemble, coefficient_preset, numerical_range_bounds
from .spectral import (Projector, SpectralSplit, basis_from_projector, build_projector,
                       compute_split, pushforward_basis)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Problem:
    grid: GridSpec
    coefficients: str = "constant"
    coefficient_params: dict = field(default_factory=dict)
    alpha0: float | None = None
    nonlinearity: str = "cubic"
    amplitude: float = 1.0
    delta: float = 0.05
    eta: float | None = None
    sigma_fraction: float = 1.0
    scheme: str = "cn-ab"
    dt: float | None = None
    t_horizon: float = 1.0
    manifold: ManifoldParams = field(default_factory=ManifoldParams)
    lipschitz_samples: int = 16
    dichotomy_vectors: int = 100
    eigs_k: int | None = None
    tau_c: float | None = None
    c_min: float = 1e-6
    seed: int = 0

    def coefficient_field(self):
        return coefficient_preset(self.coefficients, self.grid, **self.coefficient_params)

    def raw_nonlinearity(self) -> CutoffNonlinearity:
        return CutoffNonlinearity(self.nonlinearity, self.amplitude, self.delta, self.grid.h, eta=self.eta)


@dataclass(eq=False)
class Solved:
    """Operator, spectrum and projector on one domain."""

    op: EllipticOperator
    split: SpectralSplit
    proj: Projector


def solve_spectrum(problem: Problem, mask: DomainMask, kind: str, coeffs=None) -> Solved:
    coeffs = problem.coefficient_field() if coeffs is None else coeffs
    op = assemble(mask, coeffs, problem.alpha0)
    split = compute_split(op, problem.eigs_k, problem.tau_c)
    proj = build_projector(split, kind, op, seed=problem.seed)
    return Solved(op, split, proj)


def a_priori_feasibility(op: EllipticOperator, epsilon: float, kind: str, sigma_fraction: float):
    """Necessary condition on ``epsilon`` from the Gershgorin enclosure of ``sigma(-A)``.

    With the midpoint recipe ``beta - alpha`` is ``min Re sigma_u / 4`` (unstable)
    or ``sigma / 2`` (stable), so ``epsilon < (beta - alpha) / 4`` needs
    ``epsilon < hi / 16`` or ``epsilon < sigma_fraction * |lo| / 8``.
    """
    lo, hi = numerical_range_bounds(op)
    bound = hi / 16.0 if kind == "unstable" else sigma_fraction * max(-lo, 0.0) / 8.0
    if not epsilon < bound:
        raise InfeasibleParametersError(
            f"epsilon={epsilon:.6g} violates epsilon < (beta-alpha)/4 for every admissible split "
            f"(a-priori bound {bound:.6g}); shrink delta"
        )


def limit_context(problem: Problem, mask: DomainMask, kind: str) -> tuple[ManifoldContext, Solved]:
    """Fit all parameters on the limit domain and build its manifold context."""
    coeffs = problem.coefficient_field()
    op = assemble(mask, coeffs, problem.alpha0)
    nl = calibrate(problem.raw_nonlinearity(), mask, problem.lipschitz_samples, problem.seed, problem.eta)
    a_priori_feasibility(op, nl.epsilon, kind, problem.sigma_fraction)
    split = compute_split(op, problem.eigs_k, problem.tau_c)
    if not split.hyperbolic:
        raise HyperbolicityError(
            "limit equilibrium is not hyperbolic: centre eigenvalues "
            + ", ".join(f"{e.value:.4g}" for e in split.sigma_c)
        )
    proj = build_projector(split, kind, op, seed=problem.seed)
    dt = default_dt(split) if problem.dt is None else problem.dt
    dc, norms = fit_dichotomy(op, proj, split, problem.sigma_fraction, problem.dichotomy_vectors,
                              problem.seed, dt)
    cone = select_cone_params(dc, nl.epsilon)
    flow = SemiflowConfig(dt, problem.scheme, problem.t_horizon)
    basis = basis_from_projector(proj)
    ctx = make_context(kind, op, split, basis, nl, dc, norms, cone, flow, problem.manifold)
    return ctx, Solved(op, split, proj)


def member_context(problem: Problem, mask: DomainMask, limit: ManifoldContext) -> ManifoldContext:
    """Context on a perturbed domain with the limit's parameters.

    Raises ``NumericalError`` (with the reason) when the member is rejected:
    not hyperbolic, wrong ``dim X+``, spectrum incompatible with the uniform
    ``alpha, beta``, or a collapsed pushed-forward basis.
    """
    kind = limit.kind
    coeffs = problem.coefficient_field()
    op = assemble(mask, coeffs, problem.alpha0)
    split = compute_split(op, problem.eigs_k, problem.tau_c)
    if not split.hyperbolic:
        raise HyperbolicityError("member not hyperbolic")
    if split.d != limit.d:
        raise NumericalError(f"rank(P_n+) = {split.d} != rank(P+) = {limit.d}")
    proj = build_projector(split, kind, op, seed=problem.seed)
    dc = limit.dichotomy
    dt = min(limit.flow.dt, default_dt(split))
    norms = make_renormed_norm(op, proj, split, dc.alpha, dc.beta, dt)
    if not norms.minus_rate <= dc.alpha:
        raise NumericalError(
            f"X-_n spectral bound {norms.minus_rate:.4g} exceeds the uniform alpha={dc.alpha:.4g}"
        )
    if proj.d and not norms.plus_rate >= dc.beta:
        raise NumericalError(
            f"X+_n spectral bound {norms.plus_rate:.4g} is below the uniform beta={dc.beta:.4g}"
        )
    basis = pushforward_basis(limit.basis, proj, problem.c_min) if proj.d else basis_from_projector(proj)
    flow = SemiflowConfig(dt, limit.flow.scheme, limit.flow.t_horizon)
    lim_proj = limit.basis.projector
    bounds = (dc.M1 * lim_proj.norm_minus, dc.M2 * lim_proj.norm_plus)
    ctx = make_context(kind, op, split, basis, limit.nl, dc, norms, limit.cone, flow, problem.manifold,
                       delta_hat=limit.delta_hat, norm_bounds=bounds,
                       stable_gap=-limit.split.stable_bound)
    ctx.R_mesh = limit.R_mesh
    ctx.T_stab = limit.T_stab
    return ctx


def try_member(problem: Problem, mask: DomainMask, limit: ManifoldContext):
    """``(context, None)`` or ``(None, reason)``."""
    try:
        return member_context(problem, mask, limit), None
    except MperturbError as exc:
        logger.info("member %s rejected: %s", mask.label, exc)
        return None, str(exc)
