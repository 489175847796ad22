"""Rightmost spectrum of ``-A``, spectral splitting and spectral projections.

Spectral projections are realised as bi-orthogonal eigen-expansions
``P = sum_j r_j <l_j, .>`` with ``<l_j, r_k> = delta_jk`` in the grid inner
product.  For semisimple eigenvalues this coincides with the Riesz projection
given by the resolvent contour integral; defective eigenvalues are detected and
rejected.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (ConvergenceError, DefectiveEigenvalueError, GeometryError,
                     HyperbolicityError, NumericalError)
from .geometry import DomainMask, extend_by_zero, l2_norm, restrict_to
from .operators import EllipticOperator, numerical_range_bounds

logger = logging.getLogger(__name__)

DENSE_LIMIT = 1500
RESIDUAL_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class EigenPair:
    value: complex
    right: np.ndarray
    left: np.ndarray
    residual: float


@dataclass(frozen=True, eq=False)
class SpectralSplit:
    eigs: list
    sigma_s: list
    sigma_c: list
    sigma_u: list
    hyperbolic: bool
    tau_c: float
    gap: float
    d: int

    @property
    def values(self) -> np.ndarray:
        return np.array([e.value for e in self.eigs])

    @property
    def stable_bound(self) -> float:
        """Largest real part among computed stable eigenvalues."""
        return max(e.value.real for e in self.sigma_s) if self.sigma_s else -np.inf

    @property
    def unstable_bound(self) -> float:
        """Smallest real part among unstable eigenvalues."""
        return min(e.value.real for e in self.sigma_u) if self.sigma_u else np.inf


@dataclass(frozen=True, eq=False)
class Projector:
    """Spectral projection onto ``X+`` in factored real form.

    ``P+ u = R (h^2 L^T u)`` with ``h^2 L^T R = I``.  ``B`` is the matrix of
    ``-A`` restricted to ``X+`` in the columns of ``R``.
    """

    split_kind: str
    mask: DomainMask
    R: np.ndarray
    L: np.ndarray
    B: np.ndarray
    values: np.ndarray
    norm_plus: float
    norm_minus: float
    residuals: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.R.shape[1]

    @property
    def h(self) -> float:
        return self.mask.grid.h

    def coords(self, u) -> np.ndarray:
        return self.h**2 * (self.L.T @ u)

    def plus(self, u) -> np.ndarray:
        return self.R @ self.coords(u)

    def minus(self, u) -> np.ndarray:
        return u - self.plus(u)


@dataclass(frozen=True, eq=False)
class SubspaceBasis:
    """Basis ``F`` (columns) of ``X+`` together with the projector it lives under."""

    vectors: np.ndarray
    projector: Projector
    conditioning: float

    @property
    def mask(self) -> DomainMask:
        return self.projector.mask

    @property
    def d(self) -> int:
        return self.vectors.shape[1]

    def coords(self, u) -> np.ndarray:
        """Coordinates of ``P+ u`` in this basis."""
        p = self.projector
        C = p.coords(self.vectors)
        return np.linalg.solve(C, p.coords(u))

    def combine(self, xi) -> np.ndarray:
        return self.vectors @ xi

    def reduced_matrix(self) -> np.ndarray:
        """Matrix of ``-A`` on ``X+`` in this basis."""
        p = self.projector
        C = p.coords(self.vectors)
        return np.linalg.solve(C, p.B @ C)

    def gram(self) -> np.ndarray:
        h = self.projector.h
        return h * h * (self.vectors.T @ self.vectors)


# ---------------------------------------------------------------------------
# eigen-solves


def _residuals(M, R, values) -> np.ndarray:
    out = np.empty(len(values))
    for j, lam in enumerate(values):
        r = R[:, j]
        out[j] = np.linalg.norm(M @ r - lam * r) / max(np.linalg.norm(r), 1e-300)
    return out


def _clusters(values, tol):
    """Group indices of (sorted) values that agree to ``tol``."""
    groups = []
    for j, lam in enumerate(values):
        for g in groups:
            if abs(values[g[0]] - lam) <= tol:
                g.append(j)
                break
        else:
            groups.append([j])
    return groups


def _dense_eigs(M):
    w, vl, vr = sla.eig(M.toarray(), left=True, right=True)
    return w, vr, vl


def _arpack(M, k, shift, attempts=5):
    last = None
    # fixed generic start vector: ARPACK's own random start makes reruns differ in the last bits
    v0 = np.random.default_rng(M.shape[0]).standard_normal(M.shape[0])
    for attempt in range(attempts):
        try:
            vals, vecs = spla.eigs(M, k=k, sigma=shift, which="LM", tol=0, v0=v0,
                                   ncv=min(M.shape[0] - 1, max(2 * k + 1, 20 + 4 * attempt)))
            return vals, vecs
        except (RuntimeError, spla.ArpackError, spla.ArpackNoConvergence) as exc:
            # singular factorisation or stagnation: nudge the shift and retry
            last = exc
            shift = shift + 1e-3 * (1.0 + abs(shift)) * (attempt + 1)
            logger.debug("ARPACK attempt %d failed (%s); retrying with shift %.6g", attempt, exc, shift)
    raise ConvergenceError(f"shift-invert Arnoldi failed after {attempts} attempts: {last}")


def _refine(M, values, R, conj=False):
    """One step of inverse iteration per eigenvalue cluster."""
    n = M.shape[0]
    I = sp.identity(n, format="csc")
    out = R.copy()
    scale = max(1.0, float(np.max(np.abs(values))))
    for g in _clusters(values, 1e-8 * scale):
        lam = values[g[0]]
        if conj:
            lam = np.conj(lam)
        try:
            lu = spla.splu((M - lam * I).tocsc().astype(complex))
            block = lu.solve(out[:, g].astype(complex))
        except RuntimeError:
            continue
        if not np.all(np.isfinite(block)):
            continue
        q, _ = np.linalg.qr(block)
        out[:, g] = q
    return out


def rightmost_eigs(op: EllipticOperator, k: int, shift: float | None = None) -> list:
    """``k`` eigenpairs of ``-A`` with largest real part (whole clusters kept).

    Shift-invert Arnoldi around ``shift`` (default: just right of the
    Gershgorin enclosure of the numerical range), one inverse-iteration
    refinement, left eigenvectors from ``-A^T`` and bi-orthonormalisation.
    A dense solve is used as fallback when the operator has at most
    ``DENSE_LIMIT`` unknowns.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    M = (-op.matrix).tocsc()
    n = M.shape[0]
    h = op.h
    if shift is None:
        shift = numerical_range_bounds(op)[1] + 1.0
    k_req = min(k + 4, n)
    use_dense = k_req >= n - 2
    if not use_dense:
        try:
            vals, R = _arpack(M, k_req, shift)
            if op.symmetric:
                lvals, Lv = vals, R
            else:
                lvals, Lv = _arpack(M.T.tocsc(), k_req, shift)
        except ConvergenceError:
            if n > DENSE_LIMIT:
                raise
            logger.warning("falling back to dense eigensolver (n=%d)", n)
            use_dense = True
    if use_dense:
        if n > DENSE_LIMIT:
            raise ConvergenceError(f"dense fallback refused for n={n} > {DENSE_LIMIT}")
        vals, R, Lv = _dense_eigs(M)
        lvals = vals.copy()

    order = np.argsort(-vals.real, kind="stable")
    vals, R = vals[order], R[:, order]
    scale = max(1.0, float(np.max(np.abs(vals))))
    ctol = 1e-7 * scale
    # keep whole clusters and conjugate pairs at the cut
    keep = min(k, len(vals))
    while keep < len(vals) and (
        abs(vals[keep] - vals[keep - 1]) <= ctol
        or abs(vals[keep] - np.conj(vals[keep - 1])) <= ctol
    ):
        keep += 1
    vals, R = vals[:keep], R[:, :keep]

    # match left vectors: -A^T y = mu y with mu ~ conj(lambda)
    if op.symmetric:
        Lm = R.copy()
    else:
        Lm = np.zeros_like(R, dtype=complex)
        used = np.zeros(len(lvals), dtype=bool)
        for g in _clusters(vals, ctol):
            target = np.conj(vals[g[0]])
            cand = [i for i in np.argsort(np.abs(lvals - target)) if not used[i]][: len(g)]
            if len(cand) < len(g) or np.max(np.abs(lvals[cand] - target)) > 1e-5 * scale:
                raise ConvergenceError(
                    f"no matching left eigenvector for eigenvalue {vals[g[0]]:.6g}"
                )
            used[cand] = True
            Lm[:, g] = Lv[:, cand]

    R = _refine(M, vals, R.astype(complex))
    Lm = R.copy() if op.symmetric else _refine(M.T.tocsc(), vals, Lm.astype(complex), conj=True)
    # Rayleigh-quotient update of the values after refinement
    vals = np.array([
        (np.vdot(Lm[:, j], M @ R[:, j]) / np.vdot(Lm[:, j], R[:, j])) if abs(np.vdot(Lm[:, j], R[:, j])) > 0
        else vals[j]
        for j in range(len(vals))
    ])
    if op.symmetric:
        vals = vals.real.astype(complex)

    # normalise rights, bi-orthonormalise lefts cluster by cluster
    R = R / (h * np.linalg.norm(R, axis=0))
    Lm = Lm / (h * np.linalg.norm(Lm, axis=0))
    for g in _clusters(vals, ctol):
        G = h * h * (Lm[:, g].conj().T @ R[:, g])
        smin = np.linalg.svd(G, compute_uv=False).min()
        if smin < 1e-8:
            raise DefectiveEigenvalueError(complex(vals[g[0]]))
        Lm[:, g] = Lm[:, g] @ np.linalg.inv(G).conj().T
    res = _residuals(M, R, vals)
    if np.max(res) > RESIDUAL_TOL:
        raise ConvergenceError(
            f"eigen-residuals above {RESIDUAL_TOL:g}: max {np.max(res):.3g}", residuals=res
        )
    return [EigenPair(complex(v), R[:, j], Lm[:, j], float(res[j])) for j, v in enumerate(vals)]


def classify(eigs, tau_c: float | None = None) -> SpectralSplit:
    """Split eigenvalues by the sign of their real part.

    ``|Re lambda| <= tau_c`` counts as centre spectrum.  The default
    ``tau_c`` is ``1e-8`` times the largest computed modulus.
    """
    if not eigs:
        raise ValueError("classify needs at least one eigenvalue")
    if tau_c is None:
        tau_c = 1e-8 * max(abs(e.value) for e in eigs)
    s = [e for e in eigs if e.value.real < -tau_c]
    c = [e for e in eigs if abs(e.value.real) <= tau_c]
    u = [e for e in eigs if e.value.real > tau_c]
    gap = min(abs(e.value.real) for e in eigs)
    return SpectralSplit(list(eigs), s, c, u, not c, float(tau_c), float(gap), len(u))


def compute_split(op: EllipticOperator, k: int | None = None, tau_c: float | None = None,
                  shift: float | None = None, k_max: int = 64) -> SpectralSplit:
    """Adaptive ``rightmost_eigs`` + ``classify``.

    ``k`` grows until at least ``d + 6`` eigenvalues are known and the
    computed tail sits left of the imaginary axis by ``10 * tau_c``.
    """
    k = 7 if k is None else k
    while True:
        eigs = rightmost_eigs(op, min(k, op.n), shift)
        split = classify(eigs, tau_c)
        tail = min(e.value.real for e in eigs)
        if len(eigs) >= op.n or (len(eigs) >= split.d + 6 and tail < -10 * split.tau_c):
            return split
        if k >= k_max:
            raise NumericalError(f"unstable spectrum not bounded within k={k_max} eigenvalues")
        k = max(2 * k, split.d + 6)


# ---------------------------------------------------------------------------
# projections


def _realify(pairs):
    """Real factors ``(R, L)`` with ``h^2 L^T R = I`` from complex bi-orthonormal pairs."""
    R, L, done = [], [], set()
    vals = [p.value for p in pairs]
    for j, p in enumerate(pairs):
        if j in done:
            continue
        if abs(p.value.imag) <= 1e-10 * max(1.0, abs(p.value)):
            r, l = p.right, p.left
            k = np.argmax(np.abs(r))
            phase = r[k] / abs(r[k])
            R.append((r / phase).real)
            L.append((l / phase).real)
            done.add(j)
        else:
            partner = next(
                (i for i, v in enumerate(vals) if i not in done and i != j
                 and abs(v - np.conj(p.value)) <= 1e-7 * max(1.0, abs(p.value))),
                None,
            )
            if partner is None:
                raise NumericalError(f"conjugate partner of {p.value:.6g} missing from the computed set")
            s = np.sqrt(2.0)
            R += [s * p.right.real, s * p.right.imag]
            L += [s * p.left.real, s * p.left.imag]
            done.update((j, partner))
    return np.array(R).T, np.array(L).T


def _lowrank_norm(U, V, h):
    """Operator norm of ``u -> h^2 U V^T u`` on the grid L2 space."""
    if U.shape[1] == 0:
        return 0.0
    _, ru = np.linalg.qr(U)
    _, rv = np.linalg.qr(V)
    return float(h * h * np.linalg.norm(ru @ rv.T, 2))


def build_projector(split: SpectralSplit, kind: str, op: EllipticOperator,
                    n_check: int = 50, seed: int = 0) -> Projector:
    """Spectral projector onto ``X+`` for ``kind`` in ``{"unstable", "stable"}``.

    ``unstable``: ``X- = X^cs, X+ = X^u``; ``stable``: ``X- = X^s, X+ = X^cu``.
    Only hyperbolic splits are supported, so ``X+ = X^u`` in both cases.
    """
    if kind not in ("unstable", "stable"):
        raise ValueError(f"unknown split kind '{kind}'")
    if not split.hyperbolic:
        vals = ", ".join(f"{e.value:.3g}" for e in split.sigma_c)
        raise HyperbolicityError(f"equilibrium is not hyperbolic: centre eigenvalues {vals}")
    h = op.h
    n = op.n
    if split.d == 0:
        R = np.zeros((n, 0))
        L = np.zeros((n, 0))
        values = np.zeros(0, dtype=complex)
    else:
        R, L = _realify(split.sigma_u)
        values = np.array([e.value for e in split.sigma_u])
        G = h * h * (L.T @ R)
        if np.linalg.norm(G - np.eye(G.shape[0])) > 1e-8:
            raise DefectiveEigenvalueError(complex(values[0]))
    B = h * h * (L.T @ (-(op.matrix @ R))) if split.d else np.zeros((0, 0))
    norm_plus = _lowrank_norm(R, L, h)
    norm_minus = 1.0 if split.d == 0 else norm_plus
    proj = Projector(kind, op.mask, R, L, B, values, norm_plus, norm_minus)

    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, n_check))
    PX = proj.plus(X)
    idem = np.max(l2_norm(proj.plus(PX) - PX, h) / l2_norm(X, h))
    A = op.matrix
    anorm = float(abs(A).sum(axis=0).max())
    comm = np.max(l2_norm(A @ PX - proj.plus(A @ X), h) / (anorm * l2_norm(X, h)))
    proj.residuals.update(idempotency=float(idem), commutation=float(comm))
    if idem > 1e-6 or comm > 1e-6:
        raise NumericalError(f"projector residuals too large: idempotency {idem:.3g}, commutation {comm:.3g}")
    return proj


def basis_from_projector(proj: Projector) -> SubspaceBasis:
    """Unit-norm realified eigenvector basis of ``X+``."""
    F = proj.R / l2_norm(proj.R, proj.h) if proj.d else proj.R.copy()
    return SubspaceBasis(F, proj, _conditioning(F, proj.h))


def _conditioning(F, h) -> float:
    if F.shape[1] == 0:
        return 1.0
    G = h * h * (F.T @ F)
    return float(np.sqrt(max(np.linalg.eigvalsh(G).min(), 0.0)))


def pushforward_basis(f: SubspaceBasis, proj_n: Projector, c_min: float = 1e-6) -> SubspaceBasis:
    """``f_{j,n} = P_n^+ (f_j restricted to Omega_n)``.

    ``conditioning`` is ``inf_{|xi|=1} ||sum_j xi_j f_{j,n}||``; a value
    below ``c_min`` means the pushed basis collapsed.
    """
    if f.mask.grid != proj_n.mask.grid:
        raise GeometryError("pushforward needs a common grid")
    if f.d != proj_n.d:
        raise NumericalError(f"dimension mismatch: dim X+ = {f.d} but dim X+_n = {proj_n.d}")
    if f.mask.same_as(proj_n.mask) and f.projector is proj_n:
        return f
    Fn = proj_n.plus(restrict_to(f.vectors, proj_n.mask, source=f.mask))
    c = _conditioning(Fn, proj_n.h)
    if c < c_min:
        raise NumericalError(f"pushed-forward basis degenerate: conditioning {c:.3g} < {c_min:g}")
    return SubspaceBasis(Fn, proj_n, c)


def _extended_factors(proj: Projector):
    return extend_by_zero(proj.R, proj.mask), extend_by_zero(proj.L, proj.mask)


def projector_gap(proj_n: Projector, proj: Projector) -> float:
    """``||P_n^+ - P^+||`` as operators on ``L^2(D)`` (zero-extended)."""
    if proj_n.mask.grid != proj.mask.grid:
        raise GeometryError("projector_gap needs a common grid")
    Rn, Ln = _extended_factors(proj_n)
    R, L = _extended_factors(proj)
    return _lowrank_norm(np.hstack([Rn, R]), np.hstack([Ln, -L]), proj.h)


def complement_gap(proj_n: Projector, proj: Projector) -> float:
    """``||(1 - P_n^+) - (1 - P^+)||`` on ``L^2(D)``.

    Here ``1`` on ``L^2(Omega_n)`` reads as restriction followed by extension,
    so the difference contains multiplication by ``1_{Omega_n} - 1_Omega``.
    """
    grid = proj.mask.grid
    diag = np.zeros(grid.size)
    diag[proj_n.mask.indices] += 1.0
    diag[proj.mask.indices] -= 1.0
    Rn, Ln = _extended_factors(proj_n)
    R, L = _extended_factors(proj)
    U = np.hstack([Rn, R])
    V = np.hstack([Ln, -L])
    h2 = proj.h**2
    N = grid.size

    def mv(x):
        x = np.asarray(x).ravel()
        return diag * x - h2 * (U @ (V.T @ x))

    def rmv(x):
        x = np.asarray(x).ravel()
        return diag * x - h2 * (V @ (U.T @ x))

    if U.shape[1] == 0 and not diag.any():
        return 0.0
    lin = spla.LinearOperator((N, N), matvec=mv, rmatvec=rmv, dtype=float)
    v0 = np.ones(N) / np.sqrt(N)
    s = spla.svds(lin, k=1, return_singular_vectors=False, v0=v0, tol=1e-10)
    return float(s[0])
