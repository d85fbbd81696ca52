"""Command-line interface.

Three subcommands cover the closed-loop workflow:

    siloop run    --scenario <file-or-name> [--mode lockstep|realtime]
                  [--seed <n>] [--out <dir>]
    siloop plot   --trace <csv> [--out <dir>]
    siloop verify --scenario <file-or-name> --trace <csv>

run executes an episode and writes <name>_trace.csv plus the binary
frame log <name>_frames.bin into the output directory.  plot renders
the two summary figures from a trace CSV.  verify audits a trace
against its scenario's invariants and prints one line per check.

The scenario argument accepts either a filesystem path or the bare
name of a bundled scenario (catchup, urban).

Exit codes: 0 success, 2 parse or usage error, 3 verification
failure, 4 runtime failure.  The environment variable SILOOP_LOG sets
the logging level (DEBUG, INFO, WARNING, ...; default WARNING).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .harness import read_trace, run_episode, write_trace
from .plots import CORRIDOR_FIGURE, TIME_FIGURE, emit_plots
from .scenario import Scenario, ScenarioError, bundled_scenario, load_scenario
from .verify import verify

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_VERIFY = 3
EXIT_RUNTIME = 4

LOG_ENV = "SILOOP_LOG"

_log = logging.getLogger("siloop")


def _configure_logging() -> None:
    name = os.environ.get(LOG_ENV, "WARNING").upper()
    level = getattr(logging, name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _resolve_scenario(arg: str) -> Scenario:
    """Treat the argument as a path first, then as a bundled scenario name."""
    if os.path.exists(arg):
        return load_scenario(arg)
    if os.sep not in arg and "/" not in arg:
        return bundled_scenario(arg)
    raise ScenarioError(f"scenario file not found: {arg}")


def _cmd_run(args: argparse.Namespace) -> int:
    scenario = _resolve_scenario(args.scenario)
    os.makedirs(args.out, exist_ok=True)
    trace_path = os.path.join(args.out, f"{scenario.name}_trace.csv")
    frames_path = os.path.join(args.out, f"{scenario.name}_frames.bin")
    _log.info("running %s (mode=%s seed=%s)", scenario.name, args.mode or "scenario", args.seed)
    episode = run_episode(scenario, mode=args.mode, seed=args.seed, frame_log=frames_path)
    write_trace(episode.records, trace_path)
    print(f"wrote {trace_path} ({len(episode)} records)")
    print(f"wrote {frames_path}")
    summary = f"mode {episode.mode}, wall time {episode.wall_time:.2f} s"
    if episode.mode == "realtime":
        summary += f", deadline misses {episode.deadline_misses}"
    print(summary)
    return EXIT_OK


def _cmd_plot(args: argparse.Namespace) -> int:
    records = read_trace(args.trace)
    emit_plots(records, args.out)
    print(f"wrote {os.path.join(args.out, TIME_FIGURE)}")
    print(f"wrote {os.path.join(args.out, CORRIDOR_FIGURE)}")
    return EXIT_OK


def _cmd_verify(args: argparse.Namespace) -> int:
    scenario = _resolve_scenario(args.scenario)
    records = read_trace(args.trace)
    report = verify(scenario, records)
    print(report.format())
    return EXIT_OK if report.passed else EXIT_VERIFY


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="siloop",
        description="software-in-the-loop longitudinal driving simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute a scenario and write its trace")
    run_p.add_argument("--scenario", required=True, help="scenario file or bundled name")
    run_p.add_argument(
        "--mode", choices=("lockstep", "realtime"), default=None,
        help="override the scenario's execution mode",
    )
    run_p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    run_p.add_argument("--out", default=".", help="output directory (default: current)")
    run_p.set_defaults(handler=_cmd_run)

    plot_p = sub.add_parser("plot", help="render figures from a trace CSV")
    plot_p.add_argument("--trace", required=True, help="trace CSV produced by run")
    plot_p.add_argument("--out", default=".", help="output directory (default: current)")
    plot_p.set_defaults(handler=_cmd_plot)

    verify_p = sub.add_parser("verify", help="audit a trace against its scenario")
    verify_p.add_argument("--scenario", required=True, help="scenario file or bundled name")
    verify_p.add_argument("--trace", required=True, help="trace CSV produced by run")
    verify_p.set_defaults(handler=_cmd_verify)

    return parser


def main(argv: list[str] | None = None) -> int:
    _configure_logging()
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except ScenarioError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_PARSE
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_PARSE
    except ValueError as err:
        # malformed trace files and bad argument combinations land here
        print(f"error: {err}", file=sys.stderr)
        return EXIT_PARSE
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as err:  # runtime faults: collisions, solver blowups
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
