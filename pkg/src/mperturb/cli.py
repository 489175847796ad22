"""``mperturb <subcommand> --config <path> [--out DIR] [--threads N] [--seed S]``."""

from __future__ import annotations

import argparse
import logging
import sys

from .errors import ConfigError, GeometryError, InfeasibleParametersError, MperturbError, ValidationError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_VALIDATION = 0, 2, 3, 4


def exit_code(exc: BaseException) -> int:
    exc = getattr(exc, "original", exc)
    if isinstance(exc, ValidationError):
        return EXIT_VALIDATION
    # infeasible epsilon is a property of the configuration, caught before any solve
    if isinstance(exc, (ConfigError, GeometryError, InfeasibleParametersError)):
        return EXIT_CONFIG
    return EXIT_NUMERICAL


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mperturb", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="TOML experiment config")
        sp.add_argument("--out", help="output directory (overrides run.out)")
        sp.add_argument("--threads", type=int, help="worker threads (overrides run.threads)")
        sp.add_argument("--seed", type=int, help="master seed (overrides run.seed)")
        sp.add_argument("--stamp", help="run stamp used in directory and file names")
        sp.add_argument("-v", "--verbose", action="count", default=0)

    for name in ("spectrum", "sweep", "validate"):
        common(sub.add_parser(name))
    man = sub.add_parser("manifold")
    man.add_argument("kind", choices=("unstable", "stable"))
    common(man)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    from .lab import load_config, run

    sub = args.command if args.command != "manifold" else f"manifold {args.kind}"
    try:
        cfg = load_config(args.config)
        store = run(cfg, sub, out=args.out, threads=args.threads, seed=args.seed, stamp=args.stamp)
    except MperturbError as exc:
        print(f"mperturb {sub}: {exc}", file=sys.stderr)
        return exit_code(exc)
    print(store.root)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
