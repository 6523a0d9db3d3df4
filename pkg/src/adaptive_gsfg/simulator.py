"""
Fixed-step co-simulation of a graph, its reference model and the weight flow.

Each step at ``t_k = k * dt``:

1. evaluate the input signals,
2. read the reference output, then advance the reference state,
3. read state-determined node outputs and evaluate direct-feedthrough nodes in
   topological order,
4. stop with the partial trace if any output left the finite range,
5. compute the error and its partials,
6. evaluate the input-dependent Fréchet values,
7. compute the branch rates,
8. advance all node states,
9. apply the rates to the adaptive weights and record the sample.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING

import numpy as np

from .config import IntegrationScheme
from .dynamics import FrechetEvaluator, LinearTF, initial_state
from .errors import Diverged, EmptyWindowError, ModelError, WeightBlowup
from .expr import Expr, check_variables, compile_expr, to_text
from .graph import Branch, BranchKey, evaluation_order, layout
from .learning import rate_kernel, step_weights

if TYPE_CHECKING:
    from .scenario import Scenario

logger = logging.getLogger(__name__)


# Signals


@dataclass(frozen=True)
class Step:
    amplitude: float = 1.0


@dataclass(frozen=True)
class Square:
    amplitude: float = 1.0
    period: float = 20.0

    def __post_init__(self) -> None:
        if not self.period > 0:
            raise ModelError(f"square wave period must be positive, got {self.period}")


@dataclass(frozen=True)
class Sawtooth:
    amplitude: float = 1.0
    period: float = 20.0

    def __post_init__(self) -> None:
        if not self.period > 0:
            raise ModelError(f"sawtooth period must be positive, got {self.period}")


@dataclass(frozen=True)
class Sine:
    amplitude: float = 1.0
    frequency: float = 0.05


@dataclass(frozen=True)
class ExprSignal:
    """Free-form signal given by an expression over ``t``."""

    expr: Expr

    def __post_init__(self) -> None:
        check_variables(self.expr, {"t"})

    @property
    def text(self) -> str:
        return to_text(self.expr)


SignalSpec = Step | Square | Sawtooth | Sine | ExprSignal


def signal_function(spec: SignalSpec) -> Callable[[float], float]:
    """Input signal as a function of time."""
    match spec:
        case Step(amplitude):
            return lambda t: amplitude
        case Square(amplitude, period):
            half = period / 2.0
            return lambda t: amplitude if math.fmod(t, period) < half else -amplitude
        case Sawtooth(amplitude, period):
            return lambda t: amplitude * (2.0 * math.fmod(t, period) / period - 1.0)
        case Sine(amplitude, frequency):
            omega = 2.0 * math.pi * frequency
            return lambda t: amplitude * math.sin(omega * t)
        case ExprSignal(expr):
            fn = compile_expr(expr)
            return lambda t: float(fn({"t": t}))
    raise TypeError(f"unknown signal {spec!r}")


def signal(spec: SignalSpec, t: float) -> float:
    """Value of an input signal at time ``t``."""
    return signal_function(spec)(t)


@dataclass(frozen=True)
class InputBinding:
    """External signal added to the input of ``node``."""

    node: int
    signal: SignalSpec


@dataclass(frozen=True)
class ReferenceModel:
    """Reference transfer function driven by the first input signal."""

    tf: LinearTF


# Trace


@dataclass
class SimulationTrace:
    """
    Time-indexed record of a run.

    Node arrays have one column per ``node_ids`` entry and branch arrays one
    column per ``branches`` entry; every array has one row per time sample.
    """

    node_ids: tuple[int, ...]
    branches: tuple[Branch, ...]
    output_nodes: tuple[int, ...]
    t: np.ndarray
    u: np.ndarray
    y: np.ndarray
    frechet: np.ndarray
    weights: np.ndarray
    rates: np.ndarray
    error: np.ndarray
    target: np.ndarray
    diagnostics: list[str] = field(default_factory=list)
    status: str = "ok"
    diverged_at: float | None = None

    @classmethod
    def from_records(
        cls,
        records: np.ndarray,
        node_ids: tuple[int, ...],
        branches: tuple[Branch, ...],
        output_nodes: tuple[int, ...],
    ) -> SimulationTrace:
        """View rows laid out as ``t, error, target, u..., y..., frechet..., weights..., rates...`` as a trace."""
        n, b = len(node_ids), len(branches)
        u, y, frechet, weights, rates = np.split(records[:, 3:], np.cumsum([n, n, n, b]), axis=1)
        return cls(
            node_ids=node_ids,
            branches=branches,
            output_nodes=output_nodes,
            t=records[:, 0],
            u=u,
            y=y,
            frechet=frechet,
            weights=weights,
            rates=rates,
            error=records[:, 1],
            target=records[:, 2],
        )

    def __len__(self) -> int:
        return len(self.t)

    def truncated(self, length: int) -> SimulationTrace:
        """Copy holding the first ``length`` samples."""
        return replace(
            self,
            t=self.t[:length].copy(),
            u=self.u[:length].copy(),
            y=self.y[:length].copy(),
            frechet=self.frechet[:length].copy(),
            weights=self.weights[:length].copy(),
            rates=self.rates[:length].copy(),
            error=self.error[:length].copy(),
            target=self.target[:length].copy(),
            diagnostics=list(self.diagnostics),
        )

    def node_column(self, node_id: int) -> int:
        return self.node_ids.index(node_id)

    def branch_column(self, key: BranchKey) -> int:
        for pos, branch in enumerate(self.branches):
            if branch.key == key:
                return pos
        raise KeyError(key)

    def output(self, node_id: int) -> np.ndarray:
        return self.y[:, self.node_column(node_id)]

    def weight(self, key: BranchKey) -> np.ndarray:
        return self.weights[:, self.branch_column(key)]

    def tracking_errors(self) -> np.ndarray:
        """``y_m - target`` per sample (rows) and output node (columns)."""
        columns = [self.node_column(node_id) for node_id in self.output_nodes]
        return self.y[:, columns] - self.target[:, None]


# Run


def run(scenario: Scenario) -> SimulationTrace:
    """
    Simulate a scenario.

    The reference model is driven by the first input signal. Its output is read
    before its state advances, so ``target[k]`` pairs with ``y[k]`` of a
    state-determined output node: both reflect the inputs up to ``t_{k-1}``.

    Raises:
        AlgebraicLoop: For a cycle of direct-feedthrough nodes
        CycleBeyondOutput: If truncated mode cannot order the branch rates
        Diverged: When a node output leaves the finite range or an adaptive weight
            passes the blow-up threshold; carries the partial trace
        SingularSystem: From full-solve learning
    """
    graph = scenario.graph
    sim = scenario.sim
    learning = scenario.learning
    dt, steps = sim.dt, sim.steps
    threshold = learning.blowup_threshold
    lay = layout(graph)
    node_ids = lay.node_ids
    branches = lay.branches
    n_nodes = len(node_ids)

    states = [initial_state(graph.node(node_id).dynamics, dt, sim.scheme) for node_id in node_ids]
    evaluators = [FrechetEvaluator(graph.node(node_id), dt, threshold) for node_id in node_ids]
    feedthrough = {node_id for node_id, state in zip(node_ids, states) if state.feedthrough}
    order = [lay.index[node_id] for node_id in evaluation_order(graph, feedthrough)]
    state_determined = [pos for pos, node_id in enumerate(node_ids) if node_id not in feedthrough]
    rates_of = rate_kernel(graph, learning)

    reference = initial_state(scenario.reference.tf, dt, sim.scheme)
    sources = [(lay.index[b.node], signal_function(b.signal)) for b in scenario.inputs]
    incoming = lay.incoming
    output_positions = [pos for pos, flag in enumerate(lay.output_mask.tolist()) if flag]
    output_ids = tuple(node_ids[pos] for pos in output_positions)
    adaptive = np.flatnonzero(lay.adaptive).tolist()
    dynamic = [pos for pos, evaluator in enumerate(evaluators) if evaluator.dynamic]

    diagnostics = [note for evaluator in evaluators for note in evaluator.notes]
    records = np.zeros((steps, 3 + 3 * n_nodes + 2 * len(branches)))

    def partial_trace(length: int, diverged_at: float | None = None) -> SimulationTrace:
        trace = SimulationTrace.from_records(records[:length], node_ids, branches, output_ids)
        trace.diagnostics.extend(diagnostics)
        if diverged_at is not None:
            trace.status = "diverged"
            trace.diverged_at = diverged_at
        return trace

    logger.info(
        f"[SIM] {scenario.name}: {steps} steps of {dt:g} s, "
        f"gamma={learning.gamma:g}, mode={learning.mode.value}, scheme={sim.scheme.value}"
    )

    w = [b.weight for b in branches]
    u = [0.0] * n_nodes
    y = [0.0] * n_nodes
    partials = [0.0] * n_nodes
    frechet = [0.0 if evaluator.dynamic else evaluator(state, 0.0) for evaluator, state in zip(evaluators, states)]
    for k in range(steps):
        t = k * dt
        external = [0.0] * n_nodes
        drive = 0.0
        for index, (pos, source) in enumerate(sources):
            value = source(t)
            external[pos] += value
            if index == 0:
                drive = value

        target = reference.output(drive)
        reference.advance(drive)

        for pos in state_determined:
            y[pos] = states[pos].output(0.0)
        for pos in order:
            u[pos] = external[pos] + sum([w[b] * y[tail] for b, tail in incoming[pos]])
            y[pos] = states[pos].output(u[pos])
        for pos in state_determined:
            u[pos] = external[pos] + sum([w[b] * y[tail] for b, tail in incoming[pos]])

        # a NaN or an overflow anywhere makes the sum fail the bound
        if not sum(map(abs, y)) <= threshold:
            for pos, value in enumerate(y):
                if not abs(value) <= threshold:
                    raise Diverged(
                        f"node {node_ids[pos]} output {value:.6g} left the finite range at t={t:.6g} s",
                        node_id=node_ids[pos],
                        time=t,
                        last_valid_time=max(t - dt, 0.0),
                        trace=partial_trace(k, t),
                    )

        error = 0.0
        for pos in output_positions:
            partials[pos] = y[pos] - target
            error += partials[pos] ** 2
        error *= 0.5

        for pos in dynamic:
            frechet[pos] = evaluators[pos](states[pos], u[pos])

        rates = rates_of(y, frechet, partials, w)

        for pos in range(n_nodes):
            states[pos].advance(u[pos])

        try:
            step_weights(w, rates, adaptive, dt, threshold, branches)
        except WeightBlowup as exc:
            raise Diverged(
                f"{exc} at t={t:.6g} s",
                time=t,
                last_valid_time=max(t - dt, 0.0),
                trace=partial_trace(k, t),
                branch=exc.branch,
            ) from exc

        records[k] = (t, error, target, *u, *y, *frechet, *w, *rates)

    trace = partial_trace(steps)
    logger.debug(f"[SIM] {scenario.name}: finished at t={trace.t[-1]:g} s")
    return trace


def simulate_reference(
    tf: LinearTF,
    spec: SignalSpec,
    duration: float,
    dt: float,
    scheme: IntegrationScheme = IntegrationScheme.RK4,
) -> tuple[np.ndarray, np.ndarray]:
    """Time grid and output of a reference model driven by ``spec``."""
    steps = max(int(round(duration / dt)), 1)
    state = initial_state(tf, dt, scheme)
    t = np.arange(steps) * dt
    out = np.zeros(steps)
    for k in range(steps):
        drive = signal(spec, t[k])
        out[k] = state.output(drive)
        state.advance(drive)
    return t, out


# Metrics


@dataclass(frozen=True)
class Metrics:
    """Tracking and adaptation figures over one time window."""

    window: tuple[float, float]
    rms_error: float
    max_abs_error: float
    max_abs_error_time: float
    final_weights: dict[BranchKey, float]
    mean_abs_rates: dict[BranchKey, float]


def metrics(trace: SimulationTrace, window: tuple[float, float]) -> Metrics:
    """
    Metrics of ``trace`` over the closed window ``[t_a, t_b]``.

    Raises:
        EmptyWindowError: If no sample falls inside the window
    """
    t_a, t_b = window
    # Half a step of slack so window edges on the grid are included
    slack = 0.5 * (trace.t[1] - trace.t[0]) if len(trace) > 1 else 0.0
    mask = (trace.t >= t_a - slack) & (trace.t <= t_b + slack)
    if not np.any(mask):
        raise EmptyWindowError(f"window [{t_a:g}, {t_b:g}] s selects no samples")
    indices = np.flatnonzero(mask)

    errors = trace.tracking_errors()[mask]
    if errors.size:
        rms = float(np.sqrt(np.mean(np.sum(errors**2, axis=1))))
        peak = np.abs(errors).max(axis=1)
        at = int(np.argmax(peak))
        max_abs, max_time = float(peak[at]), float(trace.t[indices[at]])
    else:
        rms, max_abs, max_time = 0.0, 0.0, float(trace.t[indices[0]])

    last = indices[-1]
    final = {b.key: float(trace.weights[last, pos]) for pos, b in enumerate(trace.branches)}
    mean_rates = {
        b.key: float(np.mean(np.abs(trace.rates[mask, pos])))
        for pos, b in enumerate(trace.branches)
        if b.adaptive
    }
    return Metrics(
        window=(t_a, t_b),
        rms_error=rms,
        max_abs_error=max_abs,
        max_abs_error_time=max_time,
        final_weights=final,
        mean_abs_rates=mean_rates,
    )


def first_window(trace: SimulationTrace, length: float) -> tuple[float, float]:
    start = float(trace.t[0])
    return start, start + length


def last_window(trace: SimulationTrace, length: float) -> tuple[float, float]:
    end = float(trace.t[-1])
    return max(end - length, float(trace.t[0])), end
