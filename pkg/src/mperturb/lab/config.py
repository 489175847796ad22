"""Experiment configuration: TOML with dotted sections, flattened and validated.

Every key, its type and default is listed in ``SCHEMA``; ``docs/config.md``
documents the same table.  Unknown keys are errors.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..dynamics import NONLINEARITY_PRESETS, SCHEMES
from ..errors import ConfigError
from ..geometry import FAMILY_KINDS, GridSpec
from ..manifolds import ManifoldParams
from ..operators import COEFFICIENT_PRESETS
from ..problem import Problem

_NUM = (int, float)

# key -> (accepted types, default, check, description)
SCHEMA = {
    "grid.m": (int, 31, lambda v: v >= 3, "interior nodes per side"),
    "grid.box": (list, [0.0, 1.0, 0.0, 1.0], lambda v: len(v) == 4, "box bounds x0, x1, y0, y1 (square)"),
    "coefficients.preset": (str, "constant", lambda v: v in COEFFICIENT_PRESETS, "coefficient preset"),
    "coefficients.alpha0": (_NUM, None, lambda v: v > 0, "ellipticity constant (default: measured)"),
    "coefficients.params": (dict, {}, None, "preset parameters, e.g. params.c0"),
    "nonlinearity.preset": (str, "cubic", lambda v: v in NONLINEARITY_PRESETS, "nonlinearity preset"),
    "nonlinearity.amplitude": (_NUM, 1.0, None, "amplitude c"),
    "nonlinearity.delta": (_NUM, 0.05, lambda v: v > 0, "cutoff radius delta"),
    "nonlinearity.eta": (_NUM, None, lambda v: v > 0, "target bound eta (default 12x local Lipschitz)"),
    "nonlinearity.lipschitz_samples": (int, 16, lambda v: v >= 2, "directions per Lipschitz rung"),
    "family.kind": (str, "dumbbell", lambda v: v in FAMILY_KINDS, "domain family"),
    "family.N_max": (int, 4, lambda v: v >= 1, "number of perturbed members"),
    "split.kind": (str, "unstable", lambda v: v in ("unstable", "stable"), "X- / X+ split"),
    "split.sigma_fraction": (_NUM, 1.0, lambda v: 0 < v <= 1, "fraction of the stable gap used as sigma"),
    "split.tau_c": (_NUM, None, lambda v: v > 0, "centre tolerance (default 1e-8 x spectral radius)"),
    "split.eigs_k": (int, None, lambda v: v >= 1, "initial number of eigenvalues"),
    "semiflow.scheme": (str, "cn-ab", lambda v: v in SCHEMES, "time stepping scheme"),
    "semiflow.dt": (_NUM, None, lambda v: v > 0, "time step (default min(1e-3, 0.1/max|Re lambda|))"),
    "semiflow.t_horizon": (_NUM, 1.0, lambda v: v > 0, "trajectory horizon"),
    "manifold.R_mesh": (_NUM, None, lambda v: v > 0, "X+ mesh radius (default delta/3)"),
    "manifold.mesh_points": (int, 41, lambda v: v >= 3, "mesh nodes per X+ axis"),
    "manifold.tol": (_NUM, 1e-8, lambda v: v > 0, "Lip-distance stopping tolerance"),
    "manifold.m_max": (int, 60, lambda v: v >= 1, "max graph-transform iterations"),
    "manifold.t_map": (_NUM, None, lambda v: v > 0, "graph-transform time (default: K = 0.5)"),
    "manifold.T_stab": (_NUM, None, lambda v: v > 0, "shooting horizon (default 10 / (min Re sigma_u - max Re sigma_s))"),
    "manifold.search_tol": (_NUM, 1e-7, lambda v: 0 < v < 1, "relative shooting search tolerance"),
    "manifold.delta1": (_NUM, None, lambda v: v > 0, "X- radius of the product neighbourhood"),
    "manifold.delta2": (_NUM, None, lambda v: v > 0, "X+ radius of the product neighbourhood"),
    "manifold.guard": (_NUM, 1.15, lambda v: v > 1, "guard-node factor for image coverage"),
    "sampling.directions": (int, 16, lambda v: v >= 1, "X- directions for stable patches"),
    "sampling.radial_points": (int, 3, lambda v: v >= 1, "radii per direction for stable patches"),
    "sampling.sample_points": (int, 161, lambda v: v >= 3, "samples per X+ axis for unstable patches"),
    "sampling.dichotomy_vectors": (int, 100, lambda v: v >= 1, "random vectors for M1, M2"),
    "sampling.probe_seed": (int, 7, None, "seed of the fixed probe fields"),
    "run.out": (str, "runs", None, "output directory"),
    "run.seed": (int, 0, None, "master seed"),
    "run.threads": (int, 1, lambda v: v >= 1, "worker threads"),
    "run.stamp": (str, None, None, "file-name stamp (default: UTC time)"),
}


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and key not in SCHEMA:
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict = field(default_factory=dict)
    source: str = "<defaults>"

    def __getitem__(self, key):
        return self.values[key]

    def with_overrides(self, **kw) -> "ExperimentConfig":
        vals = dict(self.values)
        for k, v in kw.items():
            key = k.replace("__", ".")
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key '{key}'")
            vals[key] = v
        return replace(self, values=validate(vals))

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self["grid.m"], tuple(float(x) for x in self["grid.box"]))

    def problem(self) -> Problem:
        v = self.values
        mp = ManifoldParams(
            R_mesh=v["manifold.R_mesh"], mesh_points=v["manifold.mesh_points"], tol=v["manifold.tol"],
            m_max=v["manifold.m_max"], t_map=v["manifold.t_map"], T_stab=v["manifold.T_stab"],
            search_tol=v["manifold.search_tol"], directions=v["sampling.directions"],
            radial_points=v["sampling.radial_points"], sample_points=v["sampling.sample_points"],
            delta1=v["manifold.delta1"], delta2=v["manifold.delta2"], guard=v["manifold.guard"],
            probe_seed=v["sampling.probe_seed"],
        )
        return Problem(
            grid=self.grid, coefficients=v["coefficients.preset"],
            coefficient_params=dict(v["coefficients.params"]), alpha0=v["coefficients.alpha0"],
            nonlinearity=v["nonlinearity.preset"], amplitude=float(v["nonlinearity.amplitude"]),
            delta=float(v["nonlinearity.delta"]), eta=v["nonlinearity.eta"],
            sigma_fraction=float(v["split.sigma_fraction"]), scheme=v["semiflow.scheme"],
            dt=v["semiflow.dt"], t_horizon=float(v["semiflow.t_horizon"]), manifold=mp,
            lipschitz_samples=v["nonlinearity.lipschitz_samples"],
            dichotomy_vectors=v["sampling.dichotomy_vectors"], eigs_k=v["split.eigs_k"],
            tau_c=v["split.tau_c"], seed=v["run.seed"],
        )

    def echo(self) -> dict:
        return dict(sorted(self.values.items()))


def validate(flat: dict) -> dict:
    """Fill defaults, type-check and range-check every key; cross-field checks last."""
    unknown = sorted(set(flat) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    out = {}
    for key, (types, default, check, _) in SCHEMA.items():
        val = flat.get(key, default)
        if val is None:
            out[key] = None
            continue
        if types is _NUM:
            ok = isinstance(val, _NUM) and not isinstance(val, bool)
        elif types is int:
            ok = isinstance(val, int) and not isinstance(val, bool)
        else:
            ok = isinstance(val, types)
        if not ok:
            raise ConfigError(f"{key}: expected {getattr(types, '__name__', 'number')}, got {val!r}")
        if check is not None and not check(val):
            raise ConfigError(f"{key}: value {val!r} violates constraint ({SCHEMA[key][3]})")
        out[key] = val
    box = out["grid.box"]
    if not all(isinstance(b, _NUM) for b in box) or abs((box[1] - box[0]) - (box[3] - box[2])) > 1e-12:
        raise ConfigError("grid.box: must be four numbers describing a square")
    for k, v in out["coefficients.params"].items():
        if not isinstance(v, _NUM):
            raise ConfigError(f"coefficients.params.{k}: expected a number, got {v!r}")
    d1, d2 = out["manifold.delta1"], out["manifold.delta2"]
    if d1 is not None and d2 is not None:
        if out["split.kind"] == "unstable" and not d1 > d2:
            raise ConfigError("manifold.delta1 must exceed manifold.delta2 for the unstable split")
        if out["split.kind"] == "stable" and not d1 < d2:
            raise ConfigError("manifold.delta1 must be below manifold.delta2 for the stable split")
    R = out["manifold.R_mesh"]
    if R is not None and R > out["nonlinearity.delta"]:
        raise ConfigError("manifold.R_mesh must not exceed nonlinearity.delta")
    return out


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    return ExperimentConfig(validate(_flatten(raw)), source)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))


def schema_markdown() -> str:
    """Markdown table of the schema (used to generate docs/config.md)."""
    rows = ["| key | type | default | meaning |", "|---|---|---|---|"]
    for key, (types, default, _, desc) in SCHEMA.items():
        tname = "number" if types is _NUM else types.__name__
        rows.append(f"| `{key}` | {tname} | `{default!r}` | {desc} |")
    return "\n".join(rows)
