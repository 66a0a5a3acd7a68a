"""Command line entry point: ``spid <subcommand> --config <file> [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .harness import COMMANDS, DEFAULTS, run_experiment
from .io import load_config

EPILOG = """\
Config files hold one `key = value` per line; `#` starts a comment. Every
subcommand writes summary.txt (sorted key=value, 6 significant digits) and
config_used.txt into --out, plus:

  simulate        trajectory.csv controls.csv energy.csv tip_xz.csv,
                  public.params and an audit-only reference.hidden.params
  identify        identified.params loss_log.csv
  train           policy.weights policy.meta training_curve.csv
  eval-stabilize  energy_vs_time.csv tip_xz.csv
  eval-track      tracked_vs_target.csv
  split           splits.csv node_velocities.csv
  dagger-refine   policy.weights policy.meta training_curve.csv

Target shapes live in the x-z plane. The egg is the oval
x = cos(w)(1 + 0.2 sin(w)), z = 0.75 sin(w), with the lower half squashed
to 60% height. The lemniscate starts at its crossing point. Each path is
scaled to its length (sinusoid 3.13 m, egg 2.92 m, lemniscate 2.77 m) and
traversed with a sin^2 speed ramp over the first and last quarter.

Files whose name contains ".hidden" are never read by any subcommand.
Failures exit with status 1 and print one line: error=<code>: <message>.
"""


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spid", description="Rope identification, control and splitting runs.",
                                 epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", type=Path, help="flat key = value file")
    ap.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    ap.add_argument("--out", type=Path, default=Path("."), help="output directory")
    ap.add_argument("--show-defaults", action="store_true", help="print the resolved defaults and exit")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.show_defaults:
        for k in sorted(DEFAULTS[args.command]):
            print(f"{k} = {DEFAULTS[args.command][k]}")
        return 0
    if args.config is None:
        print("error=bad_config: --config is required", file=sys.stderr)
        return 1
    try:
        config = load_config(args.config)
    except (OSError, ValueError) as exc:
        print(f"error=missing_file: cannot read config {args.config}: {exc}", file=sys.stderr)
        return 1
    return run_experiment(args.command, config, args.out, seed=args.seed, base_dir=args.config.parent)


if __name__ == "__main__":
    sys.exit(main())
