"""Finite-difference discretisation of the divergence-form elliptic operator

    A u = -d_i [a_ij d_j u + a_i u] + b_i d_i u + c_0 u

with homogeneous Dirichlet data on a domain mask.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, GeometryError
from .geometry import DomainMask, GridSpec, l2_inner, l2_norm

logger = logging.getLogger(__name__)

COEFFICIENT_PRESETS = ("constant", "affine", "trigonometric")


class PecletWarning(UserWarning):
    """Centred advection is under-resolved on this grid."""


@dataclass(frozen=True, eq=False)
class CoefficientField:
    """Coefficients sampled at the interior nodes of the box grid.

    Every array has shape ``(m, m)`` and is indexed ``[j, i]`` like
    :meth:`GridSpec.coordinates`.  ``a`` has shape ``(2, 2, m, m)``.
    """

    grid: GridSpec
    a: np.ndarray
    drift: np.ndarray  # a_i, shape (2, m, m)
    advection: np.ndarray  # b_i, shape (2, m, m)
    c0: np.ndarray

    def __post_init__(self):
        m = self.grid.m
        shapes = {"a": (2, 2, m, m), "drift": (2, m, m), "advection": (2, m, m), "c0": (m, m)}
        for name, shape in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != shape:
                raise ConfigError(f"coefficient '{name}' has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ConfigError(f"coefficient '{name}' has non-finite samples")
            object.__setattr__(self, name, arr)

    def min_symmetric_eigenvalue(self) -> float:
        a11, a22 = self.a[0, 0], self.a[1, 1]
        off = 0.5 * (self.a[0, 1] + self.a[1, 0])
        mean = 0.5 * (a11 + a22)
        rad = np.sqrt(0.25 * (a11 - a22) ** 2 + off**2)
        return float(np.min(mean - rad))

    def is_symmetric_diffusion(self) -> bool:
        return bool(
            np.array_equal(self.a[0, 1], self.a[1, 0])
            and not self.drift.any()
            and not self.advection.any()
        )

    def shifted(self, dc: float) -> "CoefficientField":
        return CoefficientField(self.grid, self.a, self.drift, self.advection, self.c0 + dc)


def constant_coefficients(grid: GridSpec, diffusion=1.0, cross=0.0, drift=(0.0, 0.0),
                          advection=(0.0, 0.0), c0=0.0) -> CoefficientField:
    m = grid.m
    ones = np.ones((m, m))
    if np.ndim(diffusion) == 0:
        diffusion = (diffusion, diffusion)
    a = np.zeros((2, 2, m, m))
    a[0, 0] = diffusion[0] * ones
    a[1, 1] = diffusion[1] * ones
    a[0, 1] = a[1, 0] = cross * ones
    return CoefficientField(
        grid,
        a,
        np.array([drift[0] * ones, drift[1] * ones]),
        np.array([advection[0] * ones, advection[1] * ones]),
        c0 * ones,
    )


def coefficient_preset(name: str, grid: GridSpec, **params) -> CoefficientField:
    """Named coefficient presets used by experiment configs.

    constant:       diffusion, cross, drift_x, drift_y, adv_x, adv_y, c0
    affine:         diffusion, diffusion_slope, drift, adv, c0, c0_slope
                    (fields vary linearly in x across the box)
    trigonometric:  diffusion, amplitude, cross, drift, adv, c0, c0_amplitude
    """
    X, Y = grid.coordinates()
    x = (X - grid.box[0]) / grid.side
    y = (Y - grid.box[2]) / grid.side
    m = grid.m
    p = dict(params)

    def take(key, default):
        return float(p.pop(key, default))

    if name == "constant":
        out = constant_coefficients(
            grid,
            diffusion=take("diffusion", 1.0),
            cross=take("cross", 0.0),
            drift=(take("drift_x", 0.0), take("drift_y", 0.0)),
            advection=(take("adv_x", 0.0), take("adv_y", 0.0)),
            c0=take("c0", 0.0),
        )
    elif name == "affine":
        d, ds = take("diffusion", 1.0), take("diffusion_slope", 0.5)
        dr, adv = take("drift", 0.0), take("adv", 0.0)
        c, cs = take("c0", 0.0), take("c0_slope", 0.0)
        a = np.zeros((2, 2, m, m))
        a[0, 0] = a[1, 1] = d + ds * x
        out = CoefficientField(
            grid, a,
            np.array([dr * (1 - x), dr * y]),
            np.array([adv * y, -adv * x]),
            c + cs * x,
        )
    elif name == "trigonometric":
        d, amp, cr = take("diffusion", 1.0), take("amplitude", 0.3), take("cross", 0.1)
        dr, adv = take("drift", 0.0), take("adv", 0.0)
        c, ca = take("c0", 0.0), take("c0_amplitude", 0.0)
        a = np.zeros((2, 2, m, m))
        a[0, 0] = d + amp * np.sin(2 * np.pi * x) * np.sin(2 * np.pi * y)
        a[1, 1] = d + amp * np.cos(2 * np.pi * x) * np.sin(np.pi * y)
        a[0, 1] = a[1, 0] = cr * np.sin(np.pi * x) * np.sin(np.pi * y)
        out = CoefficientField(
            grid, a,
            np.array([dr * np.sin(np.pi * y), dr * np.cos(np.pi * x)]),
            np.array([adv * np.cos(np.pi * y), adv * np.sin(np.pi * x)]),
            c + ca * np.cos(np.pi * x),
        )
    else:
        raise ConfigError(f"unknown coefficient preset '{name}' (expected one of {COEFFICIENT_PRESETS})")
    if p:
        raise ConfigError(f"unknown parameters for coefficient preset '{name}': {sorted(p)}")
    return out


def check_ellipticity(coeffs: CoefficientField, alpha0: float) -> bool:
    """True iff the symmetrised diffusion tensor has eigenvalues >= alpha0 at every node."""
    return coeffs.min_symmetric_eigenvalue() >= alpha0


def coercivity_constants(coeffs, alpha0: float) -> tuple[float, float]:
    """``(lambda_A, lambda_0)`` from node samples; the sup is taken over a family.

    ``lambda_A = ||c0^-||_inf + (1/(2 alpha0)) sum_i ||a_i + b_i||_inf`` and
    ``lambda_0 = lambda_A + alpha0/2``.
    """
    fields = [coeffs] if isinstance(coeffs, CoefficientField) else list(coeffs)
    lam = 0.0
    for c in fields:
        neg = float(np.max(np.maximum(-c.c0, 0.0)))
        s = sum(float(np.max(np.abs(c.drift[i] + c.advection[i]))) for i in range(2))
        lam = max(lam, neg + s / (2.0 * alpha0))
    return lam, lam + alpha0 / 2.0


@dataclass(frozen=True, eq=False)
class EllipticOperator:
    mask: DomainMask
    coeffs: CoefficientField
    matrix: sp.csr_matrix
    alpha0: float
    lambdaA: float
    lambda0: float
    symmetric: bool = field(default=False)

    @property
    def n(self) -> int:
        return self.mask.n_active

    @property
    def h(self) -> float:
        return self.mask.grid.h


def _shift(arr, di, dj):
    """``out[j, i] = arr[j + dj, i + di]`` with zeros outside the grid."""
    m = arr.shape[-1]
    out = np.zeros_like(arr)
    ys = slice(max(dj, 0), m + min(dj, 0))
    xs = slice(max(di, 0), m + min(di, 0))
    yd = slice(max(-dj, 0), m + min(-dj, 0))
    xd = slice(max(-di, 0), m + min(-di, 0))
    out[..., yd, xd] = arr[..., ys, xs]
    return out


def _full_grid_matrix(coeffs: CoefficientField) -> sp.csr_matrix:
    g = coeffs.grid
    m, h = g.m, g.h
    idx = np.arange(g.size).reshape(m, m)
    a, dr, adv = coeffs.a, coeffs.drift, coeffs.advection
    rows, cols, vals = [], [], []

    def add(di, dj, coef):
        valid = _shift(np.ones((m, m), dtype=bool), di, dj)
        coef = np.where(valid, coef, 0.0)
        nz = valid & (coef != 0.0)
        rows.append(idx[nz])
        cols.append(_shift(idx, di, dj)[nz])
        vals.append(coef[nz])

    diag = coeffs.c0.copy()
    # -d_x(a11 d_x u) - d_y(a22 d_y u): face values by arithmetic averaging,
    # falling back to the node value on faces that touch the box boundary.
    for comp, (di, dj) in ((0, (1, 0)), (0, (-1, 0)), (1, (0, 1)), (1, (0, -1))):
        aa = a[comp, comp]
        nb = _shift(aa, di, dj)
        inside = _shift(np.ones((m, m), dtype=bool), di, dj)
        face = np.where(inside, 0.5 * (aa + nb), aa)
        diag += face / h**2
        add(di, dj, -face / h**2)
    # cross terms -d_x(a12 d_y u) - d_y(a21 d_x u), centred 9-point
    a12, a21 = a[0, 1], a[1, 0]
    if a12.any() or a21.any():
        c = 1.0 / (4 * h * h)
        a12e, a12w = _shift(a12, 1, 0), _shift(a12, -1, 0)
        a21n, a21s = _shift(a21, 0, 1), _shift(a21, 0, -1)
        add(1, 1, -c * (a12e + a21n))
        add(1, -1, c * (a12e + a21s))
        add(-1, 1, c * (a12w + a21n))
        add(-1, -1, -c * (a12w + a21s))
    # -d_i(a_i u) + b_i d_i u, centred
    c = 1.0 / (2 * h)
    for comp, (di, dj) in ((0, (1, 0)), (1, (0, 1))):
        fwd = _shift(dr[comp], di, dj)
        bwd = _shift(dr[comp], -di, -dj)
        add(di, dj, c * (-fwd + adv[comp]))
        add(-di, -dj, c * (bwd - adv[comp]))
    rows.append(idx.ravel())
    cols.append(idx.ravel())
    vals.append(diag.ravel())
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(g.size, g.size),
    )


def assemble(mask: DomainMask, coeffs: CoefficientField, alpha0: float | None = None,
             lambda_family: tuple[float, float] | None = None) -> EllipticOperator:
    """Assemble the Dirichlet operator on ``mask``.

    ``alpha0`` defaults to the smallest symmetric diffusion eigenvalue over the
    samples.  ``lambda_family`` overrides ``(lambda_A, lambda_0)`` with values
    taken over a whole family.
    """
    if mask.grid != coeffs.grid:
        raise GeometryError("mask and coefficients live on different grids")
    if alpha0 is None:
        alpha0 = coeffs.min_symmetric_eigenvalue()
    if alpha0 <= 0 or not check_ellipticity(coeffs, alpha0):
        raise ConfigError(
            f"ellipticity fails: min symmetric diffusion eigenvalue "
            f"{coeffs.min_symmetric_eigenvalue():.6g} < alpha0={alpha0:.6g}"
        )
    bmax = float(np.max(np.abs(coeffs.advection)) + np.max(np.abs(coeffs.drift)))
    peclet = mask.grid.h * bmax / (2 * alpha0)
    if peclet >= 1.0:
        warnings.warn(f"cell Peclet number {peclet:.3g} >= 1; centred advection may oscillate",
                      PecletWarning, stacklevel=2)
    full = _full_grid_matrix(coeffs)
    idx = mask.indices
    mat = full[idx][:, idx].tocsr()
    mat.sum_duplicates()
    mat.eliminate_zeros()
    lamA, lam0 = lambda_family if lambda_family is not None else coercivity_constants(coeffs, alpha0)
    sym = abs(mat - mat.T).max() <= 1e-12 * abs(mat).max() if mat.nnz else True
    return EllipticOperator(mask, coeffs, mat, float(alpha0), lamA, lam0, bool(sym))


def apply(op: EllipticOperator, u) -> np.ndarray:
    u = np.asarray(u)
    if u.shape[0] != op.n:
        raise GeometryError(f"vector length {u.shape[0]} != operator size {op.n}")
    return op.matrix @ u


def form_value(op: EllipticOperator, u, v) -> float:
    """Discrete bilinear form ``a(u, v) = h^2 v^T A u``."""
    return float(l2_inner(v, apply(op, u), op.h))


def h1_norm(mask: DomainMask, u) -> float:
    """Discrete H^1_0 norm: ``sqrt(||u||^2 + ||grad_h u||^2)``.

    The gradient uses forward differences over every grid edge, with inactive
    nodes (and the box boundary) read as zero.
    """
    g = mask.grid
    full = np.zeros((g.m + 2, g.m + 2))
    full[1:-1, 1:-1].flat[mask.indices] = u
    dx = np.diff(full, axis=1)
    dy = np.diff(full, axis=0)
    # h^2 * sum((du/h)^2)
    grad2 = np.sum(dx**2) + np.sum(dy**2)
    return float(np.sqrt(l2_norm(u, g.h) ** 2 + grad2))


def numerical_range_bounds(op: EllipticOperator) -> tuple[float, float]:
    """Gershgorin enclosure ``[lo, hi]`` of the real parts of ``sigma(-A)``.

    Any eigenvalue ``lambda`` of ``-A`` has ``Re lambda`` inside the numerical
    range of the symmetric part of ``-A``, which Gershgorin discs bound.
    """
    s = -0.5 * (op.matrix + op.matrix.T)
    s = s.tocsr()
    d = s.diagonal()
    r = np.asarray(abs(s).sum(axis=1)).ravel() - np.abs(d)
    return float(np.min(d - r)), float(np.max(d + r))


def export_coo(op: EllipticOperator, path) -> None:
    coo = op.matrix.tocoo()
    lines = ["row,col,value"]
    lines += [f"{r},{c},{v:.17g}" for r, c, v in zip(coo.row, coo.col, coo.data)]
    Path(path).write_text("\n".join(lines) + "\n", newline="\n")
