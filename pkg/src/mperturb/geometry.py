"""Common box, domain masks and families of perturbed domains.

All domains live on one uniform Cartesian grid of the box ``D``.  A domain is
a boolean mask over the interior nodes of that grid; the Dirichlet condition
is imposed by simply not carrying the inactive nodes as unknowns, which makes
extension by zero and restriction exact at the discrete level.

Full-grid vectors are stored row-major with the row index running along ``y``:
node ``(i, j)`` (1-based, ``i`` along ``x``) has flat index ``(j-1)*m + (i-1)``.
Functions that take nodal vectors also accept 2-D arrays whose columns are
independent vectors.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import GeometryError

logger = logging.getLogger(__name__)

FAMILY_KINDS = ("dumbbell", "fingers", "notched-square", "fixed")


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid of ``m`` x ``m`` interior nodes on a square box."""

    m: int
    box: tuple[float, float, float, float] = (0.0, 1.0, 0.0, 1.0)

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 3:
            raise GeometryError(f"grid needs m >= 3 interior nodes per axis, got {self.m}")
        x0, x1, y0, y1 = self.box
        if not (x1 > x0 and y1 > y0):
            raise GeometryError(f"degenerate box {self.box}")
        if not np.isclose(x1 - x0, y1 - y0, rtol=1e-12, atol=0.0):
            raise GeometryError("box must be square so that one spacing h serves both axes")
        object.__setattr__(self, "box", tuple(float(b) for b in self.box))

    @property
    def side(self) -> float:
        return self.box[1] - self.box[0]

    @property
    def h(self) -> float:
        return self.side / (self.m + 1)

    @property
    def size(self) -> int:
        return self.m * self.m

    @property
    def area(self) -> float:
        return self.side**2

    def coordinates(self):
        """Node coordinate arrays ``X, Y`` of shape ``(m, m)`` indexed ``[j, i]``."""
        k = np.arange(1, self.m + 1) * self.h
        return np.meshgrid(self.box[0] + k, self.box[2] + k)

    def scale(self) -> float:
        """Grid resolution relative to the reference ``m = 63``."""
        return (self.m + 1) / 64.0


@dataclass(frozen=True, eq=False)
class DomainMask:
    grid: GridSpec
    active: np.ndarray
    label: str = "domain"
    indices: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        active = np.asarray(self.active, dtype=bool)
        if active.shape != (self.grid.m, self.grid.m):
            raise GeometryError(
                f"mask shape {active.shape} does not match grid ({self.grid.m}, {self.grid.m})"
            )
        if not active.any():
            raise GeometryError(f"mask '{self.label}' has no active nodes")
        active = active.copy()
        active.flags.writeable = False
        object.__setattr__(self, "active", active)
        idx = np.flatnonzero(active.ravel())
        idx.flags.writeable = False
        object.__setattr__(self, "indices", idx)

    @property
    def n_active(self) -> int:
        return int(self.indices.size)

    def same_as(self, other: "DomainMask") -> bool:
        return self.grid == other.grid and np.array_equal(self.active, other.active)

    def indicator(self) -> np.ndarray:
        return np.ones(self.n_active)


@dataclass(frozen=True)
class DomainFamily:
    """Indexed family ``n -> Omega_n`` plus its limit ``Omega``.

    ``params[n]`` holds the geometric parameters of member ``n`` and
    ``warnings`` maps clamped (under-resolved) members to a message.
    """

    kind: str
    limit: DomainMask
    members: dict
    params: dict
    warnings: dict

    @property
    def N_max(self) -> int:
        return len(self.members)

    def __iter__(self):
        return iter(sorted(self.members.items()))


def _check_grid(a: GridSpec, b: GridSpec):
    if a != b:
        raise GeometryError(f"grid mismatch: {a} vs {b}")


def extend_by_zero(u, mask: DomainMask) -> np.ndarray:
    u = np.asarray(u)
    if u.shape[0] != mask.n_active:
        raise GeometryError(
            f"vector length {u.shape[0]} does not match active-node count {mask.n_active}"
        )
    out = np.zeros((mask.grid.size,) + u.shape[1:], dtype=u.dtype)
    out[mask.indices] = u
    return out


def restrict_to(u, mask: DomainMask, source: DomainMask | None = None) -> np.ndarray:
    """Restrict ``u`` to ``mask``.

    ``u`` is a full-grid vector, or a vector on ``source`` (read as its
    zero-extension).
    """
    u = np.asarray(u)
    if source is not None:
        _check_grid(source.grid, mask.grid)
        if source is mask:
            return u.copy()
        u = extend_by_zero(u, source)
    elif u.shape[0] != mask.grid.size:
        raise GeometryError(
            f"expected a full-grid vector of length {mask.grid.size}, got {u.shape[0]}"
        )
    return u[mask.indices].copy()


def measure(mask: DomainMask) -> float:
    return mask.n_active * mask.grid.h**2


def l2_inner(u, v, h: float):
    """Mass-lumped grid inner product ``h^2 sum u v`` (column-wise for 2-D)."""
    return h * h * np.sum(np.asarray(u) * np.asarray(v), axis=0)


def l2_norm(u, h: float):
    u = np.asarray(u)
    return h * np.sqrt(np.sum(u * u, axis=0))


# ---------------------------------------------------------------------------
# shape catalogue
#
# Layouts are specified in node indices of the reference grid m = 63 and
# scaled to other resolutions.  Widths are quantised to whole cells.


def _empty(grid: GridSpec) -> np.ndarray:
    return np.zeros((grid.m, grid.m), dtype=bool)


def _fill(arr, grid: GridSpec, i0, i1, j0, j1):
    """Activate nodes with 1-based inclusive index ranges (clipped to the grid)."""
    i0, j0 = max(i0, 1), max(j0, 1)
    i1, j1 = min(i1, grid.m), min(j1, grid.m)
    if i1 >= i0 and j1 >= j0:
        arr[j0 - 1 : j1, i0 - 1 : i1] = True


def _s(grid: GridSpec, k: float) -> int:
    return int(round(k * grid.scale()))


def dumbbell_mask(grid: GridSpec, handle_width: int, label: str = "dumbbell") -> DomainMask:
    """Large square and smaller square joined by a horizontal handle.

    ``handle_width = 0`` gives the limit domain (two disjoint squares).  The
    squares differ in size so that the principal eigenvalue is simple.
    """
    a = _empty(grid)
    _fill(a, grid, _s(grid, 3), _s(grid, 30), _s(grid, 18), _s(grid, 45))
    _fill(a, grid, _s(grid, 41), _s(grid, 60), _s(grid, 22), _s(grid, 41))
    if handle_width > 0:
        centre = _s(grid, 32)
        j0 = centre - handle_width // 2
        _fill(a, grid, _s(grid, 30) + 1, _s(grid, 41) - 1, j0, j0 + handle_width - 1)
    return DomainMask(grid, a, label)


def _finger_base(grid: GridSpec):
    return _s(grid, 8), _s(grid, 55), _s(grid, 4), _s(grid, 43)


def fingers_mask(grid: GridSpec, count: int, width: int, length: int | None = None,
                 label: str = "fingers") -> DomainMask:
    """Rectangle with ``count`` vertical fingers of ``width`` cells on its top side."""
    i0, i1, j0, j1 = _finger_base(grid)
    a = _empty(grid)
    _fill(a, grid, i0, i1, j0, j1)
    if length is None:
        length = _s(grid, 12)
    if count > 0 and width > 0:
        span = i1 - i0 + 1
        for q in range(count):
            lo = i0 + (q * span) // count
            hi = i0 + ((q + 1) * span) // count
            start = lo + (hi - lo - width) // 2
            _fill(a, grid, start, start + width - 1, j1 + 1, j1 + length)
    return DomainMask(grid, a, label)


def notched_mask(grid: GridSpec, depth: int, label: str = "notched-square") -> DomainMask:
    """Square with a one-cell-wide slit of ``depth`` cells cut down from the top side."""
    lo, hi = _s(grid, 8), _s(grid, 55)
    a = _empty(grid)
    _fill(a, grid, lo, hi, lo, hi)
    if depth > 0:
        col = _s(grid, 32)
        a[hi - depth : hi, col - 1] = False
    return DomainMask(grid, a, label)


def full_mask(grid: GridSpec, label: str = "box") -> DomainMask:
    return DomainMask(grid, np.ones((grid.m, grid.m), dtype=bool), label)


def build_family(kind: str, N_max: int, grid: GridSpec, base: DomainMask | None = None) -> DomainFamily:
    """Build a family of perturbed domains indexed ``n = 1..N_max``.

    Feature sizes halve with ``n``.  Members whose feature would drop below one
    cell are clamped to one cell and listed in ``DomainFamily.warnings``.
    ``base`` is the (unperturbed) domain used by ``kind="fixed"``; it defaults
    to the whole box.
    """
    if kind not in FAMILY_KINDS:
        raise GeometryError(f"unknown family kind '{kind}' (expected one of {FAMILY_KINDS})")
    if N_max < 1:
        raise GeometryError("N_max must be >= 1")

    members, params, warnings = {}, {}, {}
    if kind == "fixed":
        limit = base if base is not None else full_mask(grid, "fixed")
        for n in range(1, N_max + 1):
            members[n] = limit
            params[n] = {}
        return DomainFamily(kind, limit, members, params, warnings)

    if kind == "dumbbell":
        w0 = max(_s(grid, 16), 1)
        limit = dumbbell_mask(grid, 0, "dumbbell-limit")
        for n in range(1, N_max + 1):
            w = w0 / 2 ** (n - 1)
            if w < 1:
                warnings[n] = f"handle width {w:g} cells clamped to 1"
            w = max(int(w), 1)
            members[n] = dumbbell_mask(grid, w, f"dumbbell-{n}")
            params[n] = {"handle_width": w}
    elif kind == "fingers":
        total = max(_s(grid, 16), 1)
        limit = fingers_mask(grid, 0, 0, label="fingers-limit")
        for n in range(1, N_max + 1):
            count = 2**n
            w = total / count
            if w < 1:
                warnings[n] = f"finger width {w:g} cells clamped to 1; excess measure no longer constant"
            w = max(int(w), 1)
            members[n] = fingers_mask(grid, count, w, label=f"fingers-{n}")
            params[n] = {"finger_count": count, "finger_width": w}
    else:
        d0 = max(_s(grid, 16), 1)
        limit = notched_mask(grid, 0, "notched-limit")
        for n in range(1, N_max + 1):
            d = d0 / 2 ** (n - 1)
            if d < 1:
                warnings[n] = f"notch depth {d:g} cells clamped to 1"
            d = max(int(d), 1)
            members[n] = notched_mask(grid, d, f"notched-{n}")
            params[n] = {"notch_depth": d}
    for n, msg in warnings.items():
        logger.warning("family %s member %d: %s", kind, n, msg)
    return DomainFamily(kind, limit, members, params, warnings)


# ---------------------------------------------------------------------------
# bitmap text format
#
#   mask v1
#   m 63
#   box 0 1 0 1
#   label dumbbell-1
#   <m rows of '0'/'1', top row (largest y) first>


def mask_to_bitmap(mask: DomainMask) -> str:
    g = mask.grid
    buf = io.StringIO()
    buf.write("mask v1\n")
    buf.write(f"m {g.m}\n")
    buf.write("box " + " ".join(repr(b) for b in g.box) + "\n")
    buf.write(f"label {mask.label}\n")
    for row in mask.active[::-1]:
        buf.write("".join("1" if x else "0" for x in row) + "\n")
    return buf.getvalue()


def mask_from_bitmap(text: str) -> DomainMask:
    lines = [ln.rstrip("\n") for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].strip() != "mask v1":
        raise GeometryError("not a mask bitmap (missing 'mask v1' header)")
    header = {}
    k = 1
    while k < len(lines) and lines[k].split()[0] in ("m", "box", "label"):
        key, _, rest = lines[k].partition(" ")
        header[key] = rest.strip()
        k += 1
    try:
        m = int(header["m"])
        box = tuple(float(x) for x in header["box"].split())
    except (KeyError, ValueError) as exc:
        raise GeometryError(f"bad bitmap header: {exc}") from exc
    rows = lines[k:]
    if len(rows) != m or any(len(r) != m or set(r) - {"0", "1"} for r in rows):
        raise GeometryError("bitmap body must be m rows of m '0'/'1' characters")
    active = np.array([[c == "1" for c in r] for r in rows[::-1]])
    return DomainMask(GridSpec(m, box), active, header.get("label", "domain"))


def save_mask(mask: DomainMask, path) -> None:
    Path(path).write_text(mask_to_bitmap(mask), newline="\n")


def load_mask(path) -> DomainMask:
    return mask_from_bitmap(Path(path).read_text())
