"""
Branch-weight adaptation.

Rates follow the recursive gradient law on signal-flow graphs: for branch
``i -> j``::

    rate_ij = G'_j * (y_i / y_j) * (-gamma * y_j * dE/dy_j + sum_k w_jk * rate_jk)

Truncated mode stops the recursion at output nodes and evaluates the branches
in dependency order. Full-solve mode keeps every coupling and solves
``(I - Phi) rates = mu`` by LU factorization.
"""

from __future__ import annotations

import functools
import graphlib
import logging
import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lu_solve

from .config import DEFAULT_Y_FLOOR, LearningConfig, LearningMode
from .dynamics import FrechetEvaluator, initial_state
from .errors import CycleBeyondOutput, NumericalFault, SingularSystem, WeightBlowup
from .graph import (
    Branch,
    BranchKey,
    GraphLayout,
    GsfgGraph,
    PhiSystem,
    assemble_arrays,
    assemble_phi,
    describe_topology,
    evaluate_static,
    factorize,
    floor_magnitude,
    layout,
)

logger = logging.getLogger(__name__)

RESIDUAL_TOLERANCE = 1e-9
GRADCHECK_H = 1e-5
GRADCHECK_REL_FLOOR = 1e-4

# (y, frechet, partials, weights) -> rates, all ordered like layout(graph)
RateKernel = Callable[[Sequence[float], Sequence[float], Sequence[float], Sequence[float]], list[float]]


@dataclass
class LearningState:
    """Weights and rates of all branches in ``graph.branch_order``, plus the error value."""

    branches: tuple
    weights: np.ndarray
    rates: np.ndarray
    error_value: float = 0.0

    @classmethod
    def initial(cls, graph: GsfgGraph) -> LearningState:
        order = graph.branch_order
        return cls(
            branches=order,
            weights=np.array([b.weight for b in order], dtype=float),
            rates=np.zeros(len(order)),
        )

    def weight(self, tail: int, head: int) -> float:
        return float(self.weights[self._position(tail, head)])

    def rate(self, tail: int, head: int) -> float:
        return float(self.rates[self._position(tail, head)])

    def _position(self, tail: int, head: int) -> int:
        for pos, branch in enumerate(self.branches):
            if branch.key == (tail, head):
                return pos
        raise KeyError((tail, head))

    def weight_map(self) -> dict[BranchKey, float]:
        return {b.key: float(w) for b, w in zip(self.branches, self.weights)}

    def rate_map(self) -> dict[BranchKey, float]:
        return {b.key: float(r) for b, r in zip(self.branches, self.rates)}


def error_and_partials(
    y: Mapping[int, float], targets: Mapping[int, float]
) -> tuple[float, dict[int, float]]:
    """
    Squared tracking error ``E = 1/2 sum_m (y_m - target_m)^2`` over output nodes.

    Returns:
        E and ``dE/dy`` for every node in ``y`` (zero for non-output nodes)
    """
    partials = {node_id: 0.0 for node_id in y}
    for node_id, target in targets.items():
        partials[node_id] = y[node_id] - target
    error = 0.5 * sum(partials[node_id] ** 2 for node_id in targets)
    return error, partials


# Truncated mode


@functools.cache
def truncated_plan(graph: GsfgGraph) -> tuple[tuple[int, tuple[int, ...]], ...]:
    """
    Evaluation order of branch rates in truncated mode.

    Each entry is a branch position and the positions of the downstream branches
    its rate depends on (empty for branches into output nodes).

    Raises:
        CycleBeyondOutput: If the recursion does not terminate at output nodes
    """
    lay = layout(graph)
    order = lay.branches
    sorter: graphlib.TopologicalSorter[int] = graphlib.TopologicalSorter()
    downstream: dict[int, tuple[int, ...]] = {}
    for l, branch in enumerate(order):
        if branch.head in graph.output_nodes:
            deps: tuple[int, ...] = ()
        else:
            deps = tuple(m for m, other in enumerate(order) if other.tail == branch.head)
        downstream[l] = deps
        sorter.add(l, *deps)
    try:
        ranked = list(sorter.static_order())
    except graphlib.CycleError as exc:
        branches = ", ".join(str(order[l]) for l in exc.args[1])
        raise CycleBeyondOutput(
            f"branch rates form a cycle that avoids every output node ({branches}); "
            "use the full learning mode for this topology"
        ) from None
    return tuple((l, downstream[l]) for l in ranked)


def _truncated_kernel(
    lay: GraphLayout,
    plan: tuple[tuple[int, tuple[int, ...]], ...],
    gamma: float,
    y_floor: float,
) -> RateKernel:
    tails, heads = lay.tails.tolist(), lay.heads.tolist()
    output = lay.output_mask.tolist()
    steps = [(l, tails[l], heads[l], output[heads[l]], deps) for l, deps in plan]
    size = len(lay.branches)

    def rates(
        y: Sequence[float], frechet: Sequence[float], partials: Sequence[float], w: Sequence[float]
    ) -> list[float]:
        out = [0.0] * size
        for l, i, j, into_output, deps in steps:
            if into_output:
                out[l] = -gamma * y[i] * frechet[j] * partials[j]
            elif deps:
                coupling = sum(w[m] * out[m] for m in deps)
                y_j = math.copysign(max(abs(y[j]), y_floor), y[j])
                out[l] = frechet[j] * (y[i] / y_j) * coupling
        return out

    return rates


def truncated_rates_array(
    graph: GsfgGraph,
    y: np.ndarray,
    frechet: np.ndarray,
    partials: np.ndarray,
    weights: np.ndarray,
    gamma: float,
    y_floor: float = DEFAULT_Y_FLOOR,
) -> np.ndarray:
    """Array form of ``weight_rates_truncated``; node arrays follow ``layout(graph)``."""
    kernel = _truncated_kernel(layout(graph), truncated_plan(graph), gamma, y_floor)
    columns = (np.asarray(a, dtype=float).tolist() for a in (y, frechet, partials, weights))
    return np.array(kernel(*columns))


def weight_rates_truncated(
    graph: GsfgGraph,
    y: Mapping[int, float],
    frechet: Mapping[int, float],
    partials: Mapping[int, float],
    config: LearningConfig,
    weights: Mapping[BranchKey, float] | None = None,
) -> dict[BranchKey, float]:
    """
    Branch rates with the recursion truncated at output nodes.

    Branches into an output node j get ``-gamma * y_i * G'_j * dE/dy_j``;
    branches into interior nodes combine the rates of the branches leaving j.
    Rates of fixed branches are computed the same way and only feed upstream
    rates; branches into non-output sinks get rate 0.

    Raises:
        CycleBeyondOutput: If the downstream recursion has a cycle
    """
    lay = layout(graph)
    rates = truncated_rates_array(
        graph,
        np.array([float(y.get(n, 0.0)) for n in lay.node_ids]),
        np.array([float(frechet.get(n, 1.0)) for n in lay.node_ids]),
        np.array([float(partials.get(n, 0.0)) for n in lay.node_ids]),
        np.array([float((weights or {}).get(b.key, b.weight)) for b in lay.branches]),
        config.gamma,
        config.y_floor,
    )
    return {b.key: float(r) for b, r in zip(lay.branches, rates)}


# Full-solve mode


def solve_rates(system: PhiSystem, config: LearningConfig, topology: str = "") -> np.ndarray:
    """
    Solve ``(I - Phi) rates = mu`` with LU and partial pivoting.

    Raises:
        SingularSystem: If ``|det(I - Phi)|`` is not above the tolerance
        NumericalFault: If the solution misses the residual bound
    """
    size = len(system.mu)
    if size == 0:
        return np.zeros(0)
    factors, det = factorize(system)
    tol = config.effective_det_tol(size)
    if factors is None or not abs(det) > tol:
        raise SingularSystem(det, topology or "coupled branch rates")
    rates = lu_solve(factors, system.mu)
    residual = float(np.max(np.abs((np.eye(size) - system.phi) @ rates - system.mu)))
    bound = RESIDUAL_TOLERANCE * (1.0 + float(np.max(np.abs(system.mu))))
    if not residual <= bound:
        raise NumericalFault(f"learning system residual {residual:.3e} exceeds {bound:.3e}")
    return rates


def weight_rates_full(
    system: PhiSystem, config: LearningConfig, graph: GsfgGraph | None = None
) -> dict[BranchKey, float]:
    """
    Branch rates from the complete coupled system.

    Raises:
        SingularSystem: With the determinant and, when ``graph`` is given, the loop
    """
    topology = describe_topology(graph) if graph is not None else ""
    rates = solve_rates(system, config, topology)
    return {b.key: float(r) for b, r in zip(system.branch_order, rates)}


def compute_rates(
    graph: GsfgGraph,
    lay: GraphLayout,
    y: np.ndarray,
    frechet: np.ndarray,
    partials: np.ndarray,
    weights: np.ndarray,
    config: LearningConfig,
) -> np.ndarray:
    """Rates for one snapshot under the configured mode; arrays follow ``lay``."""
    if config.mode is LearningMode.TRUNCATED:
        return truncated_rates_array(
            graph, y, frechet, partials, weights, config.gamma, config.y_floor
        )
    phi, mu = assemble_arrays(lay, y, frechet, partials, weights, config.gamma, config.y_floor)
    system = PhiSystem(phi=phi, mu=mu, branch_order=lay.branches)
    try:
        return solve_rates(system, config)
    except SingularSystem as exc:
        raise SingularSystem(exc.determinant, describe_topology(graph)) from None


def rate_kernel(graph: GsfgGraph, config: LearningConfig) -> RateKernel:
    """
    Rate function for repeated snapshots of one graph.

    The truncated plan is resolved once; the returned callable takes plain
    sequences ordered like ``layout(graph)`` and returns the rates as a list.

    Raises:
        CycleBeyondOutput: In truncated mode, if the recursion does not terminate
    """
    lay = layout(graph)
    if config.mode is LearningMode.TRUNCATED:
        return _truncated_kernel(lay, truncated_plan(graph), config.gamma, config.y_floor)

    def full(
        y: Sequence[float], frechet: Sequence[float], partials: Sequence[float], w: Sequence[float]
    ) -> list[float]:
        arrays = (np.array(a, dtype=float) for a in (y, frechet, partials, w))
        return compute_rates(graph, lay, *arrays, config).tolist()

    return full


def step_weights(
    weights: list[float],
    rates: Sequence[float],
    positions: Sequence[int],
    dt: float,
    blowup_threshold: float,
    branches: Sequence[Branch],
) -> None:
    """
    Explicit Euler step ``w += rate * dt`` in place, on ``positions`` only.

    Raises:
        WeightBlowup: For the first updated weight outside ``[-blowup_threshold, blowup_threshold]``
    """
    blown = -1
    for pos in positions:
        value = weights[pos] + rates[pos] * dt
        weights[pos] = value
        if blown < 0 and not abs(value) <= blowup_threshold:
            blown = pos
    if blown >= 0:
        raise WeightBlowup(branches[blown].key, weights[blown])


def apply_rates(
    state: LearningState,
    dt: float,
    adaptive: np.ndarray | None = None,
    blowup_threshold: float = math.inf,
) -> np.ndarray:
    """
    Explicit Euler step ``w += rate * dt`` on adaptive branches only.

    Raises:
        WeightBlowup: If an adaptive weight leaves ``[-blowup_threshold, blowup_threshold]``
    """
    mask = (
        np.array([b.adaptive for b in state.branches], dtype=bool)
        if adaptive is None
        else adaptive
    )
    weights = state.weights.tolist()
    try:
        step_weights(
            weights, state.rates.tolist(), np.flatnonzero(mask).tolist(), dt, blowup_threshold, state.branches
        )
    finally:
        state.weights = np.array(weights)
    return state.weights


# Neural-network harness


def sigmoid(p: float) -> float:
    return 1.0 / (1.0 + math.exp(-p))


def nn_weight_rates(
    network: GsfgGraph,
    rates_in: Mapping[int, float],
    potentials: Mapping[int, float],
    targets: Mapping[int, float],
    gamma: float,
    y_floor: float = DEFAULT_Y_FLOOR,
) -> dict[BranchKey, float]:
    """
    Weight rates of a feedforward sigmoid network.

    For the weight ``i -> j`` with firing rates ``r`` and potentials ``p``::

        rate_ij = s'(p_j) * (r_i / r_j) * (-gamma * r_j * (r_j - target_j) + sum_k w_jk * rate_jk)

    where ``s`` is the logistic sigmoid and the error term is present only for
    neurons with a target.

    Args:
        network: Feedforward graph
        rates_in: Firing rate of every neuron
        potentials: Potential of every non-input neuron
        targets: Desired firing rate of the output neurons
        gamma: Adaptation rate
        y_floor: Floor applied to ``r_j`` in denominators
    """
    outgoing: dict[int, list] = {node_id: [] for node_id in network.node_ids}
    for branch in network.branches:
        outgoing[branch.tail].append(branch)

    sorter: graphlib.TopologicalSorter[int] = graphlib.TopologicalSorter()
    for branch in network.branches:
        sorter.add(branch.tail, branch.head)
    try:
        ranked = list(sorter.static_order())
    except graphlib.CycleError as exc:
        raise CycleBeyondOutput(f"network is not feedforward: {exc.args[1]}") from None

    rates: dict[BranchKey, float] = {}
    # Downstream neurons come first
    for j in ranked:
        for branch in network.branches:
            if branch.head != j:
                continue
            i = branch.tail
            r_j = rates_in[j]
            s = sigmoid(potentials[j])
            drive = sum(w.weight * rates[w.key] for w in outgoing[j])
            if j in targets:
                drive += -gamma * r_j * (r_j - targets[j])
            rates[branch.key] = s * (1.0 - s) * (rates_in[i] / float(floor_magnitude(r_j, y_floor))) * drive
    return rates


# Gradient check


@dataclass(frozen=True)
class GradcheckRow:
    branch: BranchKey
    label: str
    engine_rate: float
    fd_rate: float

    @property
    def rel_error(self) -> float:
        return relative_error(self.engine_rate, self.fd_rate)


@dataclass(frozen=True)
class GradcheckReport:
    rows: tuple[GradcheckRow, ...] = field(default_factory=tuple)
    h: float = GRADCHECK_H

    @property
    def max_rel_error(self) -> float:
        return max((row.rel_error for row in self.rows), default=0.0)


def relative_error(a: float, b: float) -> float:
    """``|a - b| / max(|a|, |b|, 1e-4)``."""
    return abs(a - b) / max(abs(a), abs(b), GRADCHECK_REL_FLOOR)


def squared_error(y: Mapping[int, float], targets: Mapping[int, float]) -> float:
    return error_and_partials(y, targets)[0]


def finite_difference_rates(
    graph: GsfgGraph,
    inputs: Mapping[int, float],
    targets: Mapping[int, float],
    gamma: float,
    h: float = GRADCHECK_H,
    weights: Mapping[BranchKey, float] | None = None,
) -> dict[BranchKey, float]:
    """``-gamma * dE/dw`` by central differences for every adaptive branch of a static graph."""
    base = graph.initial_weights() if weights is None else {**graph.initial_weights(), **weights}
    result: dict[BranchKey, float] = {}
    for branch in graph.adaptive_branches:
        upper = dict(base)
        upper[branch.key] = base[branch.key] + h
        lower = dict(base)
        lower[branch.key] = base[branch.key] - h
        e_upper = squared_error(evaluate_static(graph, inputs, upper)[1], targets)
        e_lower = squared_error(evaluate_static(graph, inputs, lower)[1], targets)
        result[branch.key] = -gamma * (e_upper - e_lower) / (2.0 * h)
    return result


def static_frechet_values(graph: GsfgGraph, u: Mapping[int, float]) -> dict[int, float]:
    """Fréchet values of identity and static-function nodes at the given inputs."""
    return {
        node.id: FrechetEvaluator(node, 1.0)(initial_state(node.dynamics, 1.0), u[node.id])
        for node in graph.nodes
    }


def gradcheck(
    graph: GsfgGraph,
    inputs: Mapping[int, float],
    targets: Mapping[int, float],
    gamma: float = 1.0,
    h: float = GRADCHECK_H,
    weights: Mapping[BranchKey, float] | None = None,
    y_floor: float = DEFAULT_Y_FLOOR,
) -> GradcheckReport:
    """
    Compare engine rates with ``-gamma * dE/dw`` by central differences.

    The engine side solves the complete coupled system, which is the exact
    gradient flow on static acyclic graphs.

    Args:
        graph: Acyclic graph of identity and static-function nodes
        inputs: External signal per input node
        targets: Target output per output node
        gamma: Adaptation rate
        h: Weight perturbation
        weights: Branch weights (initial weights when omitted)
        y_floor: Denominator floor
    """
    current = graph.initial_weights() if weights is None else {**graph.initial_weights(), **weights}
    u, y = evaluate_static(graph, inputs, current)
    _, partials = error_and_partials(y, targets)
    frechet = static_frechet_values(graph, u)
    config = LearningConfig(gamma=gamma, mode=LearningMode.FULL_SOLVE, y_floor=y_floor)
    system = assemble_phi(graph, y, frechet, gamma, partials, current, y_floor)
    engine = weight_rates_full(system, config, graph)
    reference = finite_difference_rates(graph, inputs, targets, gamma, h, current)
    rows = tuple(
        GradcheckRow(b.key, b.name, engine[b.key], reference[b.key]) for b in graph.adaptive_branches
    )
    report = GradcheckReport(rows=rows, h=h)
    logger.debug(f"[LEARN] gradcheck over {len(rows)} branches, max relative error {report.max_rel_error:.3e}")
    return report


def format_gradcheck(report: GradcheckReport) -> str:
    """Plain-text table of a gradient check."""
    lines = [f"{'branch':<12} {'engine':>24} {'finite-diff':>24} {'rel_error':>10}"]
    for row in report.rows:
        name = f"{row.branch[0]}->{row.branch[1]}"
        if row.label and not row.label.startswith("w_"):
            name = f"{name} {row.label}"
        lines.append(
            f"{name:<12} {row.engine_rate:>24.15e} {row.fd_rate:>24.15e} {row.rel_error:>10.2e}"
        )
    lines.append(f"max relative error: {report.max_rel_error:.3e} (h={report.h:g})")
    return "\n".join(lines)

