"""Concurrent adaptation-rate sweeps over one scenario."""

from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass, replace

import anyio
import anyio.to_thread
import numpy as np

from .errors import NumericalFault
from .scenario import Scenario, format_number
from .simulator import first_window, last_window, metrics, run

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SweepRow:
    """Outcome of one run of a sweep; failed runs carry no metrics."""

    gamma: float
    status: str
    rms_first_window: float | None = None
    rms_last_window: float | None = None

    @property
    def ratio(self) -> float | None:
        if self.rms_first_window is None or self.rms_last_window is None or self.rms_first_window == 0:
            return None
        return self.rms_last_window / self.rms_first_window


def gamma_grid(start: float, stop: float, steps: int) -> list[float]:
    """``steps`` evenly spaced adaptation rates from ``start`` to ``stop`` inclusive."""
    if steps < 1:
        raise ValueError(f"sweep needs at least one step, got {steps}")
    if start < 0 or stop < 0:
        raise ValueError("adaptation rates must be non-negative")
    if steps == 1:
        return [float(start)]
    return [float(g) for g in np.linspace(start, stop, steps)]


def run_one(scenario: Scenario, gamma: float) -> SweepRow:
    """Run a scenario at one adaptation rate; numerical failures become a row status."""
    variant = replace(scenario, learning=replace(scenario.learning, gamma=gamma))
    try:
        trace = run(variant)
    except NumericalFault as exc:
        logger.info(f"[SWEEP] gamma={gamma:g}: {type(exc).__name__}: {exc}")
        return SweepRow(gamma=gamma, status="diverged")
    window = scenario.sim.window
    first = metrics(trace, first_window(trace, window))
    final = metrics(trace, last_window(trace, window))
    logger.info(f"[SWEEP] gamma={gamma:g}: final-window rms {final.rms_error:.6g}")
    return SweepRow(
        gamma=gamma,
        status="ok",
        rms_first_window=first.rms_error,
        rms_last_window=final.rms_error,
    )


async def sweep(scenario: Scenario, gammas: list[float], workers: int | None = None) -> list[SweepRow]:
    """
    Run one simulation per adaptation rate in worker threads.

    Args:
        scenario: Base scenario
        gammas: Adaptation rates to try
        workers: Maximum number of concurrent runs (one per rate when omitted)

    Returns:
        One row per rate, sorted by rate
    """
    limiter = anyio.CapacityLimiter(workers or max(len(gammas), 1))
    rows: list[SweepRow] = []

    async def worker(gamma: float) -> None:
        row = await anyio.to_thread.run_sync(functools.partial(run_one, scenario, gamma), limiter=limiter)
        rows.append(row)

    async with anyio.create_task_group() as tg:
        for gamma in gammas:
            tg.start_soon(worker, gamma)

    return sorted(rows, key=lambda row: row.gamma)


def _cell(value: float | None) -> str:
    if value is None or not math.isfinite(value):
        return "-"
    return f"{value:.6g}"


def format_sweep(rows: list[SweepRow]) -> str:
    """Plain-text table of a sweep; failed runs show ``-`` instead of numbers."""
    lines = [f"{'gamma':>12} {'status':>9} {'rms_first':>12} {'rms_last':>12} {'ratio':>10}"]
    for row in rows:
        lines.append(
            f"{format_number(row.gamma):>12} {row.status:>9} {_cell(row.rms_first_window):>12} "
            f"{_cell(row.rms_last_window):>12} {_cell(row.ratio):>10}"
        )
    return "\n".join(lines)
