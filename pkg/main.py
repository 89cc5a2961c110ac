# main.py
import argparse
import logging
import sys

# logging
logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s [%(levelname)s] %(name)s: %(message)s"
)
logger = logging.getLogger("fermidyn")

from backend.errors import FermiDynError
from backend.experiment_runner import SUBCOMMANDS, ExperimentRunner
from backend.scenario import create_scenario_file, parse_scenario


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fermidyn",
        description="Mean-field, semiclassical and bosonized dynamics of fermions on the torus",
    )
    parser.add_argument("subcommand", choices=SUBCOMMANDS + ("init-scenario",))
    parser.add_argument("--scenario", help="scenario JSON file (output path for init-scenario)")
    parser.add_argument("--out", help="output directory, overrides the scenario's output_dir")
    parser.add_argument("--threads", type=int, help="worker threads, overrides FERMIDYN_THREADS")
    parser.add_argument("--strict", action="store_true", help="treat unknown scenario keys as errors")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", action="store_true")
    verbosity.add_argument("--quiet", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    elif args.quiet:
        logging.getLogger().setLevel(logging.WARNING)

    if not args.scenario:
        logger.error("--scenario is required")
        return 2

    if args.subcommand == "init-scenario":
        create_scenario_file(args.scenario)
        return 0

    try:
        scenario = parse_scenario(args.scenario, strict=args.strict)
    except FermiDynError as e:
        logger.error(f"Invalid scenario: {e}")
        return e.exit_code

    runner = ExperimentRunner(scenario, out_dir=args.out, threads=args.threads)
    return runner.run(args.subcommand)


if __name__ == "__main__":
    sys.exit(main())
