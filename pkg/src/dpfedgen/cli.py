"""
Command Line Interface
Privacy accountant tables, scenario runs, report regeneration and the list of
bundled scenarios
"""

import argparse
import logging
import sys
from typing import List, Optional, Sequence

import pandas as pd

from . import __version__
from .config import apply_overrides, bundled_scenarios, resolve_scenario
from .dp_core import DELTA_PRESETS, DpSpec, preset_delta, spend_table
from .exceptions import (DatasetError, NonFiniteError, PrivacyParameterError, ReportError, RoundAbortedError,
                         ScenarioConfigError, TrainingDivergedError)
from .scenario_runner import REPORT_KINDS, cmd_export_population, cmd_inspect_population, cmd_report, cmd_run

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_NUMERICAL = 3

ACCOUNTANT_COLUMNS = ["qN", "N", "q", "z", "S", "T", "delta", "epsilon", "order"]


def _broadcast(name: str, values: Optional[List], rows: int) -> List:
    if not values:
        raise PrivacyParameterError(f"--{name} is required")
    if len(values) == 1:
        return values * rows
    if len(values) != rows:
        raise PrivacyParameterError(f"--{name} given {len(values)} times, expected 1 or {rows}")
    return values


def accountant_specs(args: argparse.Namespace) -> List[DpSpec]:
    """One DpSpec per row; flags given once apply to every row"""
    rows = max(len(v or []) for v in (args.qN, args.N, args.z, args.S, args.rounds, args.delta))
    rows = max(rows, 1)
    qn = _broadcast("qN", args.qN, rows)
    population = _broadcast("N", args.N, rows)
    z = _broadcast("z", args.z, rows)
    clip = _broadcast("S", args.S, rows)
    rounds = _broadcast("rounds", args.rounds, rows)
    if args.delta_preset == "explicit":
        deltas = _broadcast("delta", args.delta, rows)
    else:
        if args.delta:
            raise PrivacyParameterError(f"--delta conflicts with --delta-preset {args.delta_preset}")
        deltas = [None] * rows
    return [DpSpec(clip[i], z[i], qn[i], population[i], rounds[i],
                   preset_delta(population[i], args.delta_preset, deltas[i])) for i in range(rows)]


def cmd_accountant(args: argparse.Namespace) -> int:
    """Print the (epsilon, order) table for the requested rows as CSV"""
    frame = pd.DataFrame(spend_table(accountant_specs(args), refine=not args.coarse), columns=ACCOUNTANT_COLUMNS)
    if args.csv:
        frame.to_csv(args.csv, index=False, float_format="%.10g", lineterminator="\n")
        logger.info(f"Accountant table written to {args.csv}")
    frame.to_csv(sys.stdout, index=False, float_format="%.6g", lineterminator="\n")
    return EXIT_OK


def _cmd_run(args: argparse.Namespace) -> int:
    config = apply_overrides(resolve_scenario(args.scenario), output_dir=args.out, seed=args.seed,
                             delta_preset=args.delta_preset)
    summary = cmd_run(config, threads=args.threads)
    print(summary.run_dir)
    return EXIT_OK


def _cmd_report(args: argparse.Namespace) -> int:
    for path in cmd_report(args.run_dir, args.kind, out=args.out, samples=args.samples):
        print(path)
    return EXIT_OK


def _cmd_scenarios(args: argparse.Namespace) -> int:
    for name in bundled_scenarios():
        print(name)
    return EXIT_OK


def _cmd_population(args: argparse.Namespace) -> int:
    if args.action == "export":
        if not args.scenario:
            raise ScenarioConfigError("population export needs --scenario")
        print(cmd_export_population(resolve_scenario(args.scenario), args.path, bugged=args.bugged))
    else:
        for key, value in cmd_inspect_population(args.path).items():
            print(f"{key}: {value}")
    return EXIT_OK


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _seed(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dpfedgen",
        description="Differentially private federated generative models: simulator, accountant and reports",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    commands = parser.add_subparsers(dest="command", required=True)

    accountant = commands.add_parser("accountant", help="Compute (epsilon, delta) for DP-FedAvg settings")
    accountant.add_argument("--qN", type=int, action="append", help="Clients per round (repeatable)")
    accountant.add_argument("--N", type=int, action="append", help="Population size (repeatable)")
    accountant.add_argument("--z", type=float, action="append", help="Noise multiplier (repeatable)")
    accountant.add_argument("--S", type=float, action="append", help="Clip norm (repeatable)")
    accountant.add_argument("--rounds", type=int, action="append", help="Training rounds T (repeatable)")
    accountant.add_argument("--delta", type=float, action="append", help="delta (repeatable)")
    accountant.add_argument("--delta-preset", choices=DELTA_PRESETS, default="explicit")
    accountant.add_argument("--coarse", action="store_true", help="Skip the fractional order refinement")
    accountant.add_argument("--csv", help="Also write the table to this file")
    accountant.set_defaults(handler=cmd_accountant)

    run = commands.add_parser("run", help="Run a scenario file or bundled scenario")
    run.add_argument("--scenario", required=True, help="Scenario JSON path or bundled scenario name")
    run.add_argument("--out", help="Output directory (overrides DPFEDGEN_OUTPUT_DIR and the scenario)")
    run.add_argument("--seed", type=_seed, help="Master seed")
    run.add_argument("--threads", type=_positive_int, default=1, help="Worker threads for client updates")
    run.add_argument("--delta-preset", choices=DELTA_PRESETS)
    run.set_defaults(handler=_cmd_run)

    report = commands.add_parser("report", help="Regenerate a report from a run directory's checkpoints")
    report.add_argument("run_dir", help="Completed run directory")
    report.add_argument("--kind", required=True, help=f"One of: {', '.join(REPORT_KINDS)}")
    report.add_argument("--out", help="Parent directory for the regenerated files")
    report.add_argument("--samples", type=_positive_int, help="Sample count (bins for histograms)")
    report.set_defaults(handler=_cmd_report)

    scenarios = commands.add_parser("scenarios", help="List bundled scenarios")
    scenarios.set_defaults(handler=_cmd_scenarios)

    population = commands.add_parser("population", help="Export or inspect a population container")
    population.add_argument("action", choices=["export", "inspect"])
    population.add_argument("path", help="Container directory")
    population.add_argument("--scenario", help="Scenario whose population is exported")
    population.add_argument("--bugged", action="store_true", help="Export the population after bug injection")
    population.set_defaults(handler=_cmd_population)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.handler(args)
    except (ScenarioConfigError, PrivacyParameterError, ReportError, DatasetError) as exc:
        logger.error(str(exc))
        return EXIT_USAGE
    except (TrainingDivergedError, NonFiniteError) as exc:
        round_index = getattr(exc, "round_index", None)
        where = f" at round {round_index}" if round_index is not None else ""
        logger.error(f"Numerical failure{where}: {exc}")
        return EXIT_NUMERICAL
    except RoundAbortedError as exc:
        if isinstance(exc.cause, NonFiniteError):
            logger.error(f"Numerical failure at round {exc.round_index}: {exc}")
            return EXIT_NUMERICAL
        logger.error(str(exc))
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
