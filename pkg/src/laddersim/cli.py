"""Command line entry point: ``laddersim <scenario> --seed N --out DIR``."""

from __future__ import annotations

import argparse
import sys

from .scenarios import SCENARIOS, ConfigError, emit_report, load_config, run_scenario


def build_parser():
    p = argparse.ArgumentParser(prog="laddersim", description="Run a seeded summarization-ladder scenario.")
    p.add_argument("scenario", choices=sorted(SCENARIOS))
    p.add_argument("--config", help="scenario config (JSON); defaults to the bundled one")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--steps", type=int, help="override the config's step count")
    p.add_argument("--lr", type=float, help="override the config's learning rate")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.scenario, args.config, args.steps, args.lr)
        result = run_scenario(args.scenario, cfg, args.seed)
        emit_report(result, args.out)
    except (ConfigError, OSError, ValueError) as e:
        print(f"laddersim: error: {e}", file=sys.stderr)
        return 2
    print(f"{result.scenario}: {'PASS' if result.passed else 'FAIL'} (outputs in {args.out})")
    for c in result.checks:
        print("  " + c.line())
    return 0 if result.passed else 1


if __name__ == "__main__":
    sys.exit(main())
