"""
Adaptive GSFG - Command-line interface.

Subcommands:

- ``validate``: load and validate a scenario
- ``run``: simulate a scenario and write CSV traces and a summary
- ``gradcheck``: compare engine rates with finite differences on a static graph
- ``poles``: print the poles of every transfer function in a scenario
- ``sweep``: run a scenario over a range of adaptation rates concurrently

Scenarios are given as file paths or by the name of a shipped scenario. Exit
status is 0 on success, 1 when a scenario fails numerically and 2 for usage or
configuration errors.
"""

import argparse
import logging
import os
import sys
from dataclasses import replace

import anyio
from exceptiongroup import BaseExceptionGroup

from . import __version__
from .config import LearningMode
from .dynamics import LinearTF, initial_state, transfer_function_poles
from .errors import Diverged
from .learning import format_gradcheck, gradcheck
from .scenario import (
    Scenario,
    diverged_summary,
    resolve_scenario,
    summarize,
    write_csv,
    write_summary,
)
from .simulator import run, signal
from .sweep import format_sweep, gamma_grid, sweep

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

GRADCHECK_TOLERANCE = 1e-6


def cli(argv=None):
    """
    Parse command line arguments.

    Falls back to the ``GSFG_DEBUG`` environment variable for debug logging
    when ``--debug`` is not given.

    Returns:
        Namespace: Parsed arguments.
    """
    parser = argparse.ArgumentParser(
        prog="adaptive-gsfg",
        description=f"Adaptive generalized signal-flow graphs (version {__version__})",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")

    # Logging options
    group = parser.add_mutually_exclusive_group()
    group.add_argument("--silent", action="store_true", help="Show only error messages")
    group.add_argument(
        "--debug",
        action="store_true",
        help="Enable debug logging (can also be set through 'GSFG_DEBUG' environment variable)",
    )

    commands = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def scenario_command(name: str, help_text: str) -> argparse.ArgumentParser:
        command = commands.add_parser(name, help=help_text, description=help_text)
        command.add_argument(
            "scenario",
            metavar="SCENARIO",
            help="Scenario file, or the name of a shipped scenario (e.g. stable_plant)",
        )
        return command

    scenario_command("validate", "Load and validate a scenario")

    run_parser = scenario_command("run", "Simulate a scenario")
    run_parser.add_argument("--csv", metavar="PATH", help="Write the trace as CSV")
    run_parser.add_argument("--summary", metavar="PATH", help="Write the summary here instead of stdout")
    run_parser.add_argument("--gamma", type=float, help="Override the adaptation rate")
    run_parser.add_argument("--dt", type=float, help="Override the step size in seconds")
    run_parser.add_argument(
        "--mode",
        choices=[mode.value for mode in LearningMode],
        help="Override the learning mode",
    )

    gradcheck_parser = scenario_command("gradcheck", "Check engine rates against finite differences")
    gradcheck_parser.add_argument("--h", type=float, default=1e-5, help="Weight perturbation (default: 1e-5)")

    scenario_command("poles", "Print the poles of every transfer function in a scenario")

    sweep_parser = scenario_command("sweep", "Run a scenario over a range of adaptation rates")
    sweep_parser.add_argument("--gamma-from", type=float, required=True, help="First adaptation rate")
    sweep_parser.add_argument("--gamma-to", type=float, required=True, help="Last adaptation rate")
    sweep_parser.add_argument("--steps", type=int, required=True, help="Number of adaptation rates")
    sweep_parser.add_argument("--workers", type=int, help="Maximum number of concurrent runs")

    args = parser.parse_args(argv)

    # Fallback to environment variables (CLI args take precedence)
    if not args.debug:
        args.debug = os.getenv("GSFG_DEBUG", "").lower() in (
            "1",
            "true",
            "yes",
            "on",
        )

    return args


class _LowercaseLevelFormatter(logging.Formatter):
    """Formatter that lowercases the level name."""

    def format(self, record):
        record.levelname = record.levelname.lower()
        return super().format(record)


_handler: logging.Handler | None = None


def configure_logging(args):
    """Configure logging based on command line arguments."""
    global _handler
    if args.silent:
        log_level = logging.ERROR
    elif args.debug:
        log_level = logging.DEBUG
    else:
        log_level = logging.INFO

    # Diagnostics go to stderr, stdout is reserved for command output
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(
        _LowercaseLevelFormatter(
            fmt="%(asctime)s.%(msecs)03dZ [%(name)s] [%(levelname)s] %(message)s",
            datefmt="%Y-%m-%dT%H:%M:%S",
        )
    )
    if _handler is not None:
        logging.root.removeHandler(_handler)
    _handler = handler
    logging.root.addHandler(handler)
    logging.root.setLevel(log_level)


def extract_root_cause(eg: BaseExceptionGroup) -> BaseException:
    """Extract the root cause from singly-nested exception groups.

    Exceptions from anyio task groups often get wrapped in multiple layers of
    BaseExceptionGroup. This recursively unwraps to find the actual cause.
    """
    exceptions = eg.exceptions
    while len(exceptions) == 1 and isinstance(exceptions[0], BaseExceptionGroup):
        exceptions = exceptions[0].exceptions
    if len(exceptions) == 1:
        return exceptions[0]
    return eg


def log_error(exc: BaseException) -> int:
    """Log an exception appropriately and return the exit status for it.

    Provides clean error messages without stack traces for expected error types,
    and full tracebacks for unexpected internal errors. Recursively handles
    BaseExceptionGroup by extracting and processing the root cause.

    Args:
        exc: The exception to log and handle.

    Returns:
        int: 1 for scenario failures and internal errors, 2 for usage errors.
    """
    if isinstance(exc, BaseExceptionGroup):
        cause = extract_root_cause(exc)
        if cause is not exc:
            return log_error(cause)

    # Log based on exception type
    if isinstance(exc, RuntimeError):
        logger.error(f"Scenario failure: {exc}")
        return EXIT_FAILURE
    if isinstance(exc, OSError):
        logger.error(f"System error: {exc}")
        return EXIT_USAGE
    if isinstance(exc, ValueError):
        logger.error(f"Configuration error: {exc}")
        return EXIT_USAGE

    # Unexpected internal error - include full traceback for debugging
    logger.error(f"Internal error: {exc}", exc_info=exc)
    return EXIT_FAILURE


# Commands


def _validate(args) -> int:
    scenario = resolve_scenario(args.scenario)
    graph = scenario.graph
    print(
        f"{scenario.name}: ok ({len(graph.nodes)} nodes, {len(graph.branches)} branches, "
        f"{len(graph.adaptive_branches)} adaptive)"
    )
    return EXIT_OK


def _apply_overrides(scenario: Scenario, args) -> tuple[Scenario, dict[str, object]]:
    overrides: dict[str, object] = {}
    learning, sim = scenario.learning, scenario.sim
    if args.gamma is not None:
        if args.gamma < 0:
            raise ValueError(f"--gamma must be non-negative, got {args.gamma}")
        learning = replace(learning, gamma=args.gamma)
        overrides["gamma"] = args.gamma
    if args.mode is not None:
        learning = replace(learning, mode=LearningMode(args.mode))
        overrides["mode"] = args.mode
    if args.dt is not None:
        if not args.dt > 0:
            raise ValueError(f"--dt must be positive, got {args.dt}")
        sim = replace(sim, dt=args.dt)
        overrides["dt"] = args.dt
    return replace(scenario, learning=learning, sim=sim), overrides


def _run(args) -> int:
    scenario, overrides = _apply_overrides(resolve_scenario(args.scenario), args)
    for key, value in overrides.items():
        logger.info(f"[SIM] override {key} = {value}")
    try:
        trace = run(scenario)
    except Diverged as exc:
        if exc.trace is not None and len(exc.trace) and args.csv:
            write_csv(exc.trace, args.csv, scenario.log_nodes, scenario.log_branches)
        _emit_summary(diverged_summary(scenario, exc, overrides), args.summary)
        raise

    if args.csv:
        rows = write_csv(trace, args.csv, scenario.log_nodes, scenario.log_branches)
        logger.info(f"[SIM] wrote {rows} rows to {args.csv}")
    _emit_summary(summarize(scenario, trace, overrides), args.summary)
    return EXIT_OK


def _emit_summary(summary: dict[str, str], destination: str | None) -> None:
    text = write_summary(summary, destination)
    if destination is None:
        sys.stdout.write(text)


def _gradcheck(args) -> int:
    scenario = resolve_scenario(args.scenario)
    inputs: dict[int, float] = {}
    for binding in scenario.inputs:
        inputs[binding.node] = inputs.get(binding.node, 0.0) + signal(binding.signal, 0.0)
    drive = signal(scenario.inputs[0].signal, 0.0)
    target = initial_state(scenario.reference.tf, scenario.sim.dt).output(drive)
    targets = {node_id: target for node_id in sorted(scenario.graph.output_nodes)}
    report = gradcheck(
        scenario.graph,
        inputs,
        targets,
        gamma=scenario.learning.gamma,
        h=args.h,
        y_floor=scenario.learning.y_floor,
    )
    print(format_gradcheck(report))
    if report.max_rel_error > GRADCHECK_TOLERANCE:
        logger.error(
            f"Gradient check failed: max relative error {report.max_rel_error:.3e} "
            f"exceeds {GRADCHECK_TOLERANCE:g}"
        )
        return EXIT_FAILURE
    return EXIT_OK


def format_pole(pole: complex) -> str:
    if abs(pole.imag) < 1e-9:
        return f"{pole.real:.4f}"
    return f"{pole.real:.4f}{pole.imag:+.4f}j"


def _poles(args) -> int:
    scenario = resolve_scenario(args.scenario)
    systems: list[tuple[str, LinearTF]] = [("reference", scenario.reference.tf)]
    systems += [
        (f"node {node.id}", node.dynamics)
        for node in scenario.graph.nodes
        if isinstance(node.dynamics, LinearTF)
    ]
    for title, tf in systems:
        print(f"{title}:")
        for pole in transfer_function_poles(tf):
            print(f"  {format_pole(complex(pole))}")
    return EXIT_OK


def _sweep(args) -> int:
    scenario = resolve_scenario(args.scenario)
    gammas = gamma_grid(args.gamma_from, args.gamma_to, args.steps)
    if args.workers is not None and args.workers < 1:
        raise ValueError(f"--workers must be at least 1, got {args.workers}")
    rows = anyio.run(sweep, scenario, gammas, args.workers)
    print(format_sweep(rows))
    return EXIT_OK


COMMANDS = {
    "validate": _validate,
    "run": _run,
    "gradcheck": _gradcheck,
    "poles": _poles,
    "sweep": _sweep,
}


def dispatch(argv=None) -> int:
    """
    Run one CLI command and return its exit status.

    Argument errors exit through argparse with status 2; all other failures are
    logged on stderr and mapped to a status by ``log_error``.
    """
    try:
        args = cli(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    configure_logging(args)

    try:
        return COMMANDS[args.command](args)
    except Exception as e:
        # Catch-all for any exceptions (BaseExceptionGroup etc.)
        # All exception handling logic is in log_error
        return log_error(e)


def main():
    """
    Main entry point for the adaptive-gsfg command.

    Exits with status 0 on success, 1 on scenario failures and 2 on usage errors.
    """
    try:
        status = dispatch()
    finally:
        logging.shutdown()
    sys.exit(status)


if __name__ == "__main__":
    main()
