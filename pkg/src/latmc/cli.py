"""Command-line entry point.

Subcommands
-----------
calibrate   build and serialize a preconditioner (fresh burn-in or chain CSV)
tune        staged grid search; writes tuned_config.json and tune_trace.json
run         execute the configured experiment and emit all artifacts
metrics     recompute diagnostics from a finished run directory

Exit codes: 0 success (enumeration-infeasible metric requests degrade to
warnings), 2 configuration error, 3 numeric-guard failure, 1 other errors.
"""

from __future__ import annotations

import argparse
import sys

from .errors import ConfigError, LatmcError, NumericGuardError
from .harness import (
    ExperimentConfig,
    calibrate_command,
    recompute_metrics,
    run_experiment,
    tune_command,
)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latmc",
        description="Discrete lattice MCMC experiment harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the configured experiment")
    p_run.add_argument("-c", "--config", required=True, help="YAML config file")
    p_run.add_argument("-o", "--output", default=None, help="override output directory")

    p_tune = sub.add_parser("tune", help="staged grid search for sampler parameters")
    p_tune.add_argument("-c", "--config", required=True)
    p_tune.add_argument("-o", "--output", default=None)

    p_cal = sub.add_parser("calibrate", help="calibrate and store a preconditioner")
    p_cal.add_argument("-c", "--config", required=True)
    p_cal.add_argument("-o", "--output", default=None)
    p_cal.add_argument(
        "--chains-csv", default=None, help="calibrate from a stored chain CSV instead of a burn-in run"
    )

    p_met = sub.add_parser("metrics", help="recompute diagnostics from stored chains")
    p_met.add_argument("run_dir", help="directory produced by the run subcommand")
    p_met.add_argument("-o", "--output", default=None)
    return parser


def _load_config(path: str, output_override) -> ExperimentConfig:
    config = ExperimentConfig.from_yaml(path)
    if output_override is not None:
        raw = dict(config.raw)
        raw["output_dir"] = output_override
        config = ExperimentConfig.from_dict(raw)
    return config


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            out = run_experiment(_load_config(args.config, args.output))
            print(f"run artifacts written to {out}")
        elif args.command == "tune":
            out = tune_command(_load_config(args.config, args.output))
            print(f"tuning results written to {out}")
        elif args.command == "calibrate":
            out = calibrate_command(
                _load_config(args.config, args.output), chains_csv=args.chains_csv
            )
            print(f"preconditioner written to {out}")
        elif args.command == "metrics":
            out = recompute_metrics(args.run_dir, args.output)
            print(f"metrics recomputed in {out}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericGuardError as exc:
        print(f"numeric guard: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (LatmcError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
