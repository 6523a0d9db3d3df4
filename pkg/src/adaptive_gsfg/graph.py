"""
Generalized signal-flow graph model.

Nodes carry dynamics (see ``dynamics``); branches carry scalar gains and are
either adaptive (learned) or fixed. Besides validation, this module assembles
the coupled learning system ``rates = Phi @ rates + mu`` whose rows are the
branches ordered by ``(head, tail)``.
"""

from __future__ import annotations

import functools
import graphlib
import warnings
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgWarning, lu_factor

from .config import DEFAULT_Y_FLOOR
from .dynamics import Identity, NodeSpec, StaticFunction, initial_state
from .errors import AlgebraicLoop, ModelError

BranchKey = tuple[int, int]


@dataclass(frozen=True)
class Branch:
    """
    Weighted branch from ``tail`` (node i) to ``head`` (node j).

    ``weight`` is the initial weight; fixed branches keep it for all time.
    """

    tail: int
    head: int
    weight: float
    adaptive: bool = False
    label: str | None = None

    @property
    def key(self) -> BranchKey:
        return (self.tail, self.head)

    @property
    def name(self) -> str:
        return self.label or f"w_{self.tail}_{self.head}"

    def __str__(self) -> str:
        return f"{self.tail}→{self.head}"


@dataclass(frozen=True)
class GsfgGraph:
    """Immutable graph: nodes, branches and the set of output nodes."""

    nodes: tuple[NodeSpec, ...]
    branches: tuple[Branch, ...]
    output_nodes: frozenset[int] = frozenset()

    def __post_init__(self) -> None:
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "output_nodes", frozenset(self.output_nodes))

    @property
    def node_ids(self) -> tuple[int, ...]:
        return tuple(sorted(node.id for node in self.nodes))

    def node(self, node_id: int) -> NodeSpec:
        for node in self.nodes:
            if node.id == node_id:
                return node
        raise KeyError(node_id)

    def branch(self, tail: int, head: int) -> Branch:
        for branch in self.branches:
            if branch.key == (tail, head):
                return branch
        raise KeyError((tail, head))

    @property
    def branch_order(self) -> tuple[Branch, ...]:
        """Branches sorted by ``(head, tail)``; the row order of the learning system."""
        return tuple(sorted(self.branches, key=lambda b: (b.head, b.tail)))

    @property
    def adaptive_branches(self) -> tuple[Branch, ...]:
        return tuple(b for b in self.branch_order if b.adaptive)

    def initial_weights(self) -> dict[BranchKey, float]:
        return {b.key: b.weight for b in self.branch_order}


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self) -> str:
        return "ok" if self.ok else "; ".join(self.violations)


def validate(graph: GsfgGraph, learning: bool = True) -> ValidationReport:
    """
    Check the graph invariants and report every violation.

    Args:
        graph: Graph to check
        learning: Whether adaptation is enabled (requires output nodes)
    """
    violations: list[str] = []
    ids = [node.id for node in graph.nodes]
    known = set(ids)

    seen: set[int] = set()
    for node_id in ids:
        if node_id in seen:
            violations.append(f"duplicate node id {node_id}")
        seen.add(node_id)
    if known and sorted(known) != list(range(1, len(known) + 1)):
        violations.append(f"node ids must be 1..{len(known)}, got {sorted(known)}")

    pairs: set[BranchKey] = set()
    for branch in graph.branches:
        for endpoint in (branch.tail, branch.head):
            if endpoint not in known:
                violations.append(f"branch {branch}: unknown node")
                break
        if branch.key in pairs:
            violations.append(f"duplicate branch ({branch.tail},{branch.head})")
        pairs.add(branch.key)

    for node_id in sorted(graph.output_nodes - known):
        violations.append(f"output node {node_id}: unknown node")
    if learning and not graph.output_nodes:
        violations.append("no output nodes declared while learning is enabled")

    return ValidationReport(tuple(violations))


def input_nodes(graph: GsfgGraph) -> frozenset[int]:
    """Nodes without incoming branches."""
    heads = {branch.head for branch in graph.branches}
    return frozenset(node.id for node in graph.nodes if node.id not in heads)


def floor_magnitude(y, eps: float = DEFAULT_Y_FLOOR):
    """``sign(y) * max(|y|, eps)``, with zero mapped to ``+eps``."""
    return np.copysign(np.maximum(np.abs(y), eps), y)


@dataclass(frozen=True, eq=False)
class GraphLayout:
    """
    Index arrays of a graph for vectorized assembly.

    Node positions follow ``graph.node_ids``; branch positions follow
    ``graph.branch_order``.
    """

    node_ids: tuple[int, ...]
    index: Mapping[int, int]
    branches: tuple[Branch, ...]
    tails: np.ndarray
    heads: np.ndarray
    adaptive: np.ndarray
    output_mask: np.ndarray
    # (l, m) pairs with head(l) == tail(m)
    coupling: tuple[np.ndarray, np.ndarray]
    incoming: tuple[tuple[tuple[int, int], ...], ...] = field(default=())


@functools.cache
def layout(graph: GsfgGraph) -> GraphLayout:
    node_ids = graph.node_ids
    index = {node_id: pos for pos, node_id in enumerate(node_ids)}
    order = graph.branch_order
    tails = np.array([index[b.tail] for b in order], dtype=int)
    heads = np.array([index[b.head] for b in order], dtype=int)
    pairs = [(l, m) for l, bl in enumerate(order) for m, bm in enumerate(order) if bl.head == bm.tail]
    rows = [l for l, _ in pairs]
    cols = [m for _, m in pairs]
    incoming = tuple(
        tuple((pos, index[b.tail]) for pos, b in enumerate(order) if b.head == node_id)
        for node_id in node_ids
    )
    return GraphLayout(
        node_ids=node_ids,
        index=index,
        branches=order,
        tails=tails,
        heads=heads,
        adaptive=np.array([b.adaptive for b in order], dtype=bool),
        output_mask=np.array([node_id in graph.output_nodes for node_id in node_ids], dtype=bool),
        coupling=(np.array(rows, dtype=int), np.array(cols, dtype=int)),
        incoming=incoming,
    )


@dataclass
class PhiSystem:
    """The learning system ``rates = phi @ rates + mu``."""

    phi: np.ndarray
    mu: np.ndarray
    branch_order: tuple[Branch, ...]


def assemble_arrays(
    lay: GraphLayout,
    y: np.ndarray,
    frechet: np.ndarray,
    partials: np.ndarray,
    weights: np.ndarray,
    gamma: float,
    y_floor: float = DEFAULT_Y_FLOOR,
    truncate_at_outputs: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Array form of ``assemble_phi``; all node arrays are indexed by layout position."""
    size = len(lay.branches)
    y_tail = y[lay.tails]
    g_head = frechet[lay.heads]
    ratio = g_head * y_tail / floor_magnitude(y[lay.heads], y_floor)
    mu = -gamma * y_tail * g_head * partials[lay.heads]

    phi = np.zeros((size, size))
    rows, cols = lay.coupling
    if truncate_at_outputs and len(rows):
        keep = ~lay.output_mask[lay.heads[rows]]
        rows, cols = rows[keep], cols[keep]
    phi[rows, cols] = ratio[rows] * weights[cols]
    return phi, mu


def _node_array(lay: GraphLayout, values: Mapping[int, float], default: float = 0.0) -> np.ndarray:
    return np.array([float(values.get(node_id, default)) for node_id in lay.node_ids])


def _weight_array(lay: GraphLayout, weights: Mapping[BranchKey, float] | None) -> np.ndarray:
    if weights is None:
        return np.array([b.weight for b in lay.branches])
    return np.array([float(weights.get(b.key, b.weight)) for b in lay.branches])


def assemble_phi(
    graph: GsfgGraph,
    y: Mapping[int, float],
    frechet: Mapping[int, float],
    gamma: float,
    error_partials: Mapping[int, float],
    weights: Mapping[BranchKey, float] | None = None,
    y_floor: float = DEFAULT_Y_FLOOR,
    truncate_at_outputs: bool = False,
) -> PhiSystem:
    """
    Assemble ``Phi`` and ``mu`` for one snapshot of the graph signals.

    For branch ``l = (i, j)`` and branch ``m = (j, k)``::

        phi[l, m] = G'_j * (y_i / y_j) * w_jk
        mu[l]     = -gamma * y_i * G'_j * dE/dy_j

    with ``y_j`` magnitude-floored at ``y_floor``. With ``truncate_at_outputs``
    the rows of branches into output nodes carry no downstream coupling.

    Args:
        graph: The graph
        y: Node outputs
        frechet: Node Fréchet values (missing nodes count as 1)
        gamma: Adaptation rate
        error_partials: dE/dy per node (missing nodes count as 0)
        weights: Current branch weights (initial weights when omitted)
        y_floor: Denominator floor
        truncate_at_outputs: Drop coupling of rows whose head is an output node
    """
    lay = layout(graph)
    phi, mu = assemble_arrays(
        lay,
        _node_array(lay, y),
        _node_array(lay, frechet, 1.0),
        _node_array(lay, error_partials),
        _weight_array(lay, weights),
        gamma,
        y_floor,
        truncate_at_outputs,
    )
    return PhiSystem(phi=phi, mu=mu, branch_order=lay.branches)


def factorize(system: PhiSystem) -> tuple[tuple[np.ndarray, np.ndarray] | None, float]:
    """LU factors of ``I - Phi`` with partial pivoting and the determinant they give."""
    size = len(system.mu)
    if size == 0:
        return None, 1.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LinAlgWarning)
        lu, piv = lu_factor(np.eye(size) - system.phi)
    swaps = int(np.count_nonzero(piv != np.arange(size)))
    det = float(np.prod(np.diag(lu))) * (-1.0) ** swaps
    return (lu, piv), det


def uniqueness_check(system: PhiSystem, tol: float) -> tuple[float, bool]:
    """Return ``det(I - Phi)`` and whether ``|det| > tol``."""
    _, det = factorize(system)
    return det, abs(det) > tol


def describe_topology(graph: GsfgGraph) -> str:
    """Name the loop that couples branch rates, for singular-system diagnostics."""
    for branch in graph.branch_order:
        if branch.tail == branch.head:
            return f"self-loop at node {branch.tail}"
    sorter: graphlib.TopologicalSorter[int] = graphlib.TopologicalSorter()
    for branch in graph.branches:
        sorter.add(branch.head, branch.tail)
    try:
        sorter.prepare()
    except graphlib.CycleError as exc:
        cycle = " -> ".join(str(n) for n in exc.args[1])
        return f"feedback cycle through nodes {cycle}"
    return "coupled branch rates"


def evaluation_order(graph: GsfgGraph, feedthrough: Iterable[int]) -> list[int]:
    """
    Order in which direct-feedthrough nodes must be evaluated within a step.

    Nodes without direct feedthrough are read from state and break loops.

    Raises:
        AlgebraicLoop: For a cycle made only of direct-feedthrough nodes
    """
    algebraic = set(feedthrough)
    sorter: graphlib.TopologicalSorter[int] = graphlib.TopologicalSorter()
    for node_id in sorted(algebraic):
        sorter.add(node_id)
    for branch in graph.branches:
        if branch.head in algebraic and branch.tail in algebraic:
            sorter.add(branch.head, branch.tail)
    try:
        return list(sorter.static_order())
    except graphlib.CycleError as exc:
        raise AlgebraicLoop(list(exc.args[1])) from None


def evaluate_static(
    graph: GsfgGraph,
    inputs: Mapping[int, float],
    weights: Mapping[BranchKey, float] | None = None,
) -> tuple[dict[int, float], dict[int, float]]:
    """
    Forward pass of a graph made only of identity and static-function nodes.

    Args:
        graph: Acyclic static graph
        inputs: External signal per node, added to its branch inputs
        weights: Branch weights (initial weights when omitted)

    Returns:
        Node inputs ``u`` and outputs ``y``

    Raises:
        ModelError: If a node has dynamics
        AlgebraicLoop: If the graph has a cycle
    """
    for node in graph.nodes:
        if not isinstance(node.dynamics, Identity | StaticFunction):
            raise ModelError(f"node {node.id} is not static")
    states = {node.id: initial_state(node.dynamics, 1.0) for node in graph.nodes}
    w = graph.initial_weights() if weights is None else {**graph.initial_weights(), **weights}
    u: dict[int, float] = {}
    y: dict[int, float] = {}
    for node_id in evaluation_order(graph, states):
        u[node_id] = float(inputs.get(node_id, 0.0)) + sum(
            w[b.key] * y[b.tail] for b in graph.branches if b.head == node_id
        )
        y[node_id] = states[node_id].output(u[node_id])
    return u, y
