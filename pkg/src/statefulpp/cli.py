"""Command-line entry point: ``statefulpp {run,verify,inspect} --config FILE``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

import yaml

from .config import ConfigError, load_config
from .data import DataError
from .engine import EngineError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_ENGINE = 0, 1, 2, 3

log = logging.getLogger("statefulpp")


def _epsilon_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="statefulpp", description="Repeated risk minimization in stateful environments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "run": "run the epsilon sweep and write trajectories",
        "verify": "check the convergence theory numerically and write verify_report.json",
        "inspect": "print the fully resolved config",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="YAML scenario file")
        p.add_argument("--out", default=None, help="output directory (overrides output.directory)")
        p.add_argument("--epsilon", type=_epsilon_list, default=None, help="comma-separated epsilon sweep")
        if name == "run":
            p.add_argument("--jobs", type=int, default=1, help="parallel epsilon runs")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, epsilon_override=args.epsilon)
        if args.epsilon is not None and not args.epsilon:
            raise ConfigError("--epsilon: empty list")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    # imported late so `inspect` and config errors stay fast
    from .runner import run_scenario, verify_theory

    try:
        if args.command == "inspect":
            yaml.safe_dump(cfg.to_dict(), sys.stdout, sort_keys=True)
            return EXIT_OK
        if args.command == "run":
            code, summaries = run_scenario(cfg, args.out, jobs=max(1, args.jobs))
            for s in summaries:
                print(json.dumps({k: s[k] for k in ("epsilon", "status", "iterations", "final_theta_delta")}))
            return code
        _, report = verify_theory(cfg, args.out)
        for row in report["checks"]:
            mark = "PASS" if row["pass"] else "FAIL"
            print(f"{mark} {row['property']:<18} eps={row['epsilon']:<8g} measured={row['measured']} bound={row['bound']}")
        return EXIT_OK
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except EngineError as exc:
        print(f"engine error: {exc}", file=sys.stderr)
        return EXIT_ENGINE


if __name__ == "__main__":
    sys.exit(main())
