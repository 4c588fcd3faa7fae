"""Command-line experiment runner.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .experiments import EXPERIMENTS, ConfigError, ExperimentConfig, mark_failed, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("dyncap")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # bad flags are configuration errors, not argparse's default status 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dyncap", description="Run dynamic-capacity training experiments.")
    p.add_argument("--experiment", choices=EXPERIMENTS, help="experiment to run (default: filterbank)")
    p.add_argument("--config", help="INI file with an [experiment] section; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--beta", help="penalty weight; a comma-separated list sets the sweep's beta values")
    p.add_argument("--steps", type=int, help="total training steps")
    p.add_argument("--lambda-min", type=float, help="lower bound on capacity fractions")
    p.add_argument("--out-dir", help="directory for all artifacts")
    p.add_argument("--overwrite", action="store_true", help="allow writing into a non-empty output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    config = ExperimentConfig.from_ini(args.config) if args.config else ExperimentConfig()
    overrides = {
        "experiment": args.experiment,
        "seed": args.seed,
        "total_steps": args.steps,
        "lambda_min": args.lambda_min,
        "out_dir": args.out_dir,
    }
    if args.overwrite:
        overrides["overwrite"] = True
    if args.beta is not None:
        values = [v for v in args.beta.replace(",", " ").split() if v]
        experiment = args.experiment or config.experiment
        if experiment == "beta_sweep":
            overrides["beta_list"] = values
        elif len(values) == 1:
            overrides["beta"] = values[0]
        else:
            raise ConfigError("--beta takes a single value outside the beta_sweep experiment")
    config = config.with_overrides(**overrides)
    if args.steps is not None and config.phase1_steps > config.total_steps:
        # keep the phase boundary inside a shortened run
        config = config.with_overrides(phase1_steps=config.total_steps)
    return config.validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        config = config_from_args(args)
    except ConfigError as exc:
        print(f"dyncap: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        artifacts = run_experiment(config)
    except ConfigError as exc:
        print(f"dyncap: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any failure maps to the runtime exit code
        log.debug("run failed", exc_info=True)
        mark_failed(config.out_dir, f"{type(exc).__name__}: {exc}")
        print(f"dyncap: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for name, path in artifacts.items():
        print(f"{name}: {path}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
