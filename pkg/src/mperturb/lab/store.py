"""Run directories, manifests and CSV writing."""

from __future__ import annotations

import hashlib
import json
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from .. import __version__


def write_csv(path, header, rows) -> Path:
    """Comma-separated, ``.`` decimal, header row, LF endings; floats in round-trip precision."""

    def cell(x):
        if isinstance(x, (float, np.floating)):
            return "nan" if x != x else f"{float(x):.17g}"
        return str(x)

    lines = [",".join(header)] + [",".join(cell(x) for x in r) for r in rows]
    path = Path(path)
    path.write_text("\n".join(lines) + "\n", newline="\n")
    return path


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass(eq=False)
class ResultStore:
    """One run directory: artifacts plus ``manifest.json``."""

    root: Path
    subcommand: str
    stamp: str
    config_echo: dict
    seed: int
    artifacts: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    status: str = "running"
    summary: dict = field(default_factory=dict)

    def path(self, name: str) -> Path:
        return self.root / name

    def add(self, *paths):
        for p in paths:
            p = Path(p)
            if p not in self.artifacts:
                self.artifacts.append(p)

    def time(self, stage: str):
        store = self

        class _Timer:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                store.timings[stage] = round(time.perf_counter() - self.t0, 6)

        return _Timer()

    def write_manifest(self) -> Path:
        """``manifest.json`` holds only reproducible content; stamp and timings go to ``run.json``."""
        files = {}
        for p in sorted(self.artifacts):
            files[p.name] = {"sha256": sha256(p), "bytes": p.stat().st_size}
        manifest = {
            "subcommand": self.subcommand,
            "seed": self.seed,
            "status": self.status,
            "config": self.config_echo,
            "versions": {"mperturb": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__},
            "summary": self.summary,
            "files": files,
        }
        path = self.root / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n", newline="\n")
        run = {"stamp": self.stamp, "timing_s": self.timings}
        (self.root / "run.json").write_text(json.dumps(run, indent=2, sort_keys=True) + "\n", newline="\n")
        return path


def create_store(out, subcommand: str, config_echo: dict, seed: int, stamp: str | None = None) -> ResultStore:
    stamp = stamp or time.strftime("%Y%m%dT%H%M%SZ", time.gmtime())
    root = Path(out) / f"{subcommand.replace(' ', '-')}_{stamp}"
    root.mkdir(parents=True, exist_ok=True)
    return ResultStore(root, subcommand, stamp, config_echo, seed)
