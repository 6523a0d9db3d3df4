"""Tests for adaptive_gsfg.learning module."""

import numpy as np
import pytest

from adaptive_gsfg.config import LearningConfig, LearningMode
from adaptive_gsfg.dynamics import NodeSpec, StaticFunction
from adaptive_gsfg.errors import CycleBeyondOutput, SingularSystem, WeightBlowup
from adaptive_gsfg.expr import parse
from adaptive_gsfg.graph import Branch, GsfgGraph, assemble_phi, evaluate_static, layout
from adaptive_gsfg.learning import (
    LearningState,
    apply_rates,
    compute_rates,
    error_and_partials,
    finite_difference_rates,
    format_gradcheck,
    gradcheck,
    nn_weight_rates,
    rate_kernel,
    relative_error,
    sigmoid,
    static_frechet_values,
    step_weights,
    truncated_plan,
    weight_rates_full,
    weight_rates_truncated,
)

SIGMOID = StaticFunction(parse("1/(1 + exp(-u))"))


def random_network(rng: np.random.Generator, max_nodes: int = 8):
    """
    Random acyclic sigmoid network with identity inputs.

    Output nodes are the non-input sinks; every non-input node has at least one
    incoming branch.
    """
    n = int(rng.integers(3, max_nodes + 1))
    n_inputs = int(rng.integers(1, min(3, n - 1) + 1))
    nodes = [NodeSpec(i) for i in range(1, n_inputs + 1)]
    nodes += [NodeSpec(j, SIGMOID) for j in range(n_inputs + 1, n + 1)]
    branches = []
    for j in range(n_inputs + 1, n + 1):
        tails = [i for i in range(1, j) if rng.random() < 0.6]
        if not tails:
            tails = [int(rng.integers(1, j))]
        branches += [Branch(i, j, float(rng.uniform(-1.5, 1.5)), adaptive=True) for i in tails]
    has_outgoing = {b.tail for b in branches}
    outputs = frozenset(j for j in range(n_inputs + 1, n + 1) if j not in has_outgoing)
    graph = GsfgGraph(nodes=tuple(nodes), branches=tuple(branches), output_nodes=outputs)
    inputs = {i: float(rng.uniform(0.2, 1.0)) for i in range(1, n_inputs + 1)}
    targets = {m: float(rng.uniform(0.1, 0.9)) for m in sorted(outputs)}
    return graph, inputs, targets


def chain() -> GsfgGraph:
    return GsfgGraph(
        nodes=(NodeSpec(1), NodeSpec(2, SIGMOID), NodeSpec(3, SIGMOID)),
        branches=(Branch(1, 2, 0.8, adaptive=True), Branch(2, 3, -1.2, adaptive=True)),
        output_nodes=frozenset({3}),
    )


def self_loop() -> GsfgGraph:
    return GsfgGraph(
        nodes=(NodeSpec(1), NodeSpec(2)),
        branches=(Branch(1, 1, 1.0, adaptive=True), Branch(1, 2, 1.0)),
        output_nodes=frozenset({2}),
    )


class TestErrorAndPartials:
    """Test the squared tracking error."""

    def test_error_and_partials(self):
        """Test E and dE/dy over output nodes only."""
        error, partials = error_and_partials({1: 5.0, 2: 1.5, 3: -1.0}, {2: 1.0, 3: 0.0})
        assert error == pytest.approx(0.5 * (0.25 + 1.0))
        assert partials == {1: 0.0, 2: 0.5, 3: -1.0}


class TestLearningState:
    """Test the weight and rate snapshot."""

    def test_initial_state(self):
        """Test that weights start at the branch weights in branch order."""
        state = LearningState.initial(chain())
        assert state.weight(2, 3) == -1.2
        assert state.rate(1, 2) == 0.0
        assert state.weight_map() == {(1, 2): 0.8, (2, 3): -1.2}

    def test_unknown_branch(self):
        """Test that lookups of missing branches raise KeyError."""
        with pytest.raises(KeyError):
            LearningState.initial(chain()).weight(3, 1)


class TestTruncated:
    """Test truncated-mode rates."""

    def test_branch_into_output(self):
        """Test -gamma * y_i * G'_j * dE/dy_j for a branch into an output node."""
        graph = chain()
        rates = weight_rates_truncated(
            graph,
            y={1: 1.0, 2: 0.5, 3: 0.2},
            frechet={2: 0.25, 3: 0.16},
            partials={3: 0.1},
            config=LearningConfig(gamma=2.0),
        )
        assert rates[(2, 3)] == pytest.approx(-2.0 * 0.5 * 0.16 * 0.1)
        assert rates[(1, 2)] == pytest.approx(0.25 * (1.0 / 0.5) * (-1.2) * rates[(2, 3)])

    def test_zero_gamma_freezes(self):
        """Test that gamma = 0 gives zero rates."""
        rates = weight_rates_truncated(chain(), {1: 1.0, 2: 0.5, 3: 0.2}, {}, {3: 0.1}, LearningConfig(gamma=0.0))
        assert all(rate == 0.0 for rate in rates.values())

    def test_feedback_through_output_terminates(self):
        """Test that a loop through an output node has a plan."""
        graph = GsfgGraph(
            nodes=(NodeSpec(1), NodeSpec(2)),
            branches=(Branch(1, 2, 1.0, adaptive=True), Branch(2, 1, -1.0)),
            output_nodes=frozenset({2}),
        )
        plan = truncated_plan(graph)
        assert [graph.branch_order[pos].key for pos, _ in plan] == [(1, 2), (2, 1)]

    def test_cycle_beyond_output(self):
        """Test that a loop avoiding every output node is rejected."""
        graph = GsfgGraph(
            nodes=(NodeSpec(1), NodeSpec(2), NodeSpec(3)),
            branches=(Branch(1, 2, 1.0), Branch(2, 1, 0.5), Branch(2, 3, 1.0, adaptive=True)),
            output_nodes=frozenset({3}),
        )
        with pytest.raises(CycleBeyondOutput):
            truncated_plan(graph)

    def test_non_output_sink_has_zero_rate(self):
        """Test that a branch into a sink without target does not learn."""
        graph = GsfgGraph(
            nodes=(NodeSpec(1), NodeSpec(2), NodeSpec(3)),
            branches=(Branch(1, 2, 1.0, adaptive=True), Branch(1, 3, 1.0, adaptive=True)),
            output_nodes=frozenset({2}),
        )
        rates = weight_rates_truncated(graph, {1: 1.0, 2: 1.0, 3: 1.0}, {}, {2: 0.3}, LearningConfig())
        assert rates[(1, 3)] == 0.0
        assert rates[(1, 2)] == pytest.approx(-0.3)


class TestFullSolve:
    """Test full-solve rates."""

    def test_modes_agree_on_random_static_graphs(self):
        """Test that both modes give the same rates when outputs are sinks."""
        rng = np.random.default_rng(7)
        config = LearningConfig(gamma=1.5)
        for _ in range(60):
            graph, inputs, targets = random_network(rng)
            u, y = evaluate_static(graph, inputs)
            _, partials = error_and_partials(y, targets)
            frechet = static_frechet_values(graph, u)
            truncated = weight_rates_truncated(graph, y, frechet, partials, config)
            system = assemble_phi(graph, y, frechet, config.gamma, partials)
            full = weight_rates_full(system, config, graph)
            for key, rate in full.items():
                assert truncated[key] == pytest.approx(rate, rel=1e-10, abs=1e-10)

    def test_self_loop_is_singular(self):
        """Test that a unit self-loop raises SingularSystem naming the loop."""
        graph = self_loop()
        system = assemble_phi(graph, {1: 0.7, 2: 0.7}, {}, 1.0, {2: 0.1})
        with pytest.raises(SingularSystem) as exc_info:
            weight_rates_full(system, LearningConfig(mode=LearningMode.FULL_SOLVE), graph)
        assert exc_info.value.topology == "self-loop at node 1"
        assert abs(exc_info.value.determinant) <= 1e-12

    def test_contracting_self_loop_is_solved(self):
        """Test that a self-loop with gain 1/2 doubles the local rate."""
        graph = GsfgGraph(
            nodes=(NodeSpec(1),),
            branches=(Branch(1, 1, 0.5, adaptive=True),),
            output_nodes=frozenset({1}),
        )
        system = assemble_phi(graph, {1: 2.0}, {}, 1.0, {1: 0.1})
        rates = weight_rates_full(system, LearningConfig(mode=LearningMode.FULL_SOLVE))
        assert rates[(1, 1)] == pytest.approx(-0.2 / 0.5)

    def test_compute_rates_dispatches_on_mode(self):
        """Test that compute_rates uses the configured mode and names singular loops."""
        graph = self_loop()
        lay = layout(graph)
        y = np.array([0.7, 0.7])
        frechet = np.ones(2)
        partials = np.array([0.0, 0.1])
        weights = np.array([b.weight for b in lay.branches])
        with pytest.raises(SingularSystem, match="self-loop at node 1"):
            compute_rates(graph, lay, y, frechet, partials, weights, LearningConfig(mode=LearningMode.FULL_SOLVE))


def snapshot_columns(graph: GsfgGraph, inputs, targets):
    """Static operating point as plain lists ordered like ``layout(graph)``."""
    lay = layout(graph)
    u, y = evaluate_static(graph, inputs)
    _, partials = error_and_partials(y, targets)
    frechet = static_frechet_values(graph, u)
    return (
        [float(y[n]) for n in lay.node_ids],
        [float(frechet.get(n, 1.0)) for n in lay.node_ids],
        [float(partials.get(n, 0.0)) for n in lay.node_ids],
        [b.weight for b in lay.branches],
    )


class TestRateKernel:
    """Test the per-run rate function."""

    def test_truncated_kernel_on_chain(self):
        """Test the output-branch law and its upstream combination in layout order."""
        graph = chain()
        lay = layout(graph)
        kernel = rate_kernel(graph, LearningConfig(gamma=2.0))
        weights = [b.weight for b in lay.branches]
        values = kernel([1.0, 0.5, 0.2], [1.0, 0.25, 0.16], [0.0, 0.0, 0.1], weights)
        rates = dict(zip((b.key for b in lay.branches), values))
        assert rates[(2, 3)] == pytest.approx(-2.0 * 0.5 * 0.16 * 0.1)
        assert rates[(1, 2)] == pytest.approx(0.25 * (1.0 / 0.5) * (-1.2) * rates[(2, 3)])

    def test_full_kernel_matches_compute_rates(self):
        """Test that the full-solve kernel returns the compute_rates values as a list."""
        rng = np.random.default_rng(11)
        config = LearningConfig(gamma=0.7, mode=LearningMode.FULL_SOLVE)
        graph, inputs, targets = random_network(rng)
        columns = snapshot_columns(graph, inputs, targets)
        expected = compute_rates(graph, layout(graph), *(np.array(c) for c in columns), config)
        got = rate_kernel(graph, config)(*columns)
        assert isinstance(got, list)
        np.testing.assert_array_equal(got, expected)

    @pytest.mark.parametrize("mode", [LearningMode.TRUNCATED, LearningMode.FULL_SOLVE])
    def test_rates_scale_exactly_with_gamma(self, mode):
        """Test that multiplying gamma by a power of two multiplies every rate by the same factor."""
        rng = np.random.default_rng(23)
        for _ in range(40):
            graph, inputs, targets = random_network(rng)
            columns = snapshot_columns(graph, inputs, targets)
            base = rate_kernel(graph, LearningConfig(gamma=1.5, mode=mode))(*columns)
            for factor in (0.25, 4.0, 64.0):
                scaled = rate_kernel(graph, LearningConfig(gamma=1.5 * factor, mode=mode))(*columns)
                assert scaled == [factor * rate for rate in base]


class TestStepWeights:
    """Test the in-place Euler step on plain lists."""

    def test_moves_listed_positions_only(self):
        """Test that positions outside the adaptive list keep their weight."""
        weights = [1.0, 2.0, 3.0]
        step_weights(weights, [10.0, 20.0, 30.0], [0, 2], 0.5, 1e12, layout(chain()).branches)
        assert weights == [6.0, 2.0, 18.0]

    def test_blowup_after_full_update(self):
        """Test that every weight is stepped before the first blown branch is reported."""
        branches = layout(chain()).branches
        weights = [b.weight for b in branches]
        with pytest.raises(WeightBlowup) as exc_info:
            step_weights(weights, [1e14, 1e14], [0, 1], 1.0, 1e12, branches)
        assert exc_info.value.branch == branches[0].key
        assert all(abs(w) > 1e12 for w in weights)


class TestApplyRates:
    """Test the Euler weight update."""

    def test_only_adaptive_branches_move(self):
        """Test that fixed branches keep their weight."""
        graph = GsfgGraph(
            nodes=(NodeSpec(1), NodeSpec(2)),
            branches=(Branch(1, 2, 1.0, adaptive=True), Branch(2, 1, -1.0)),
            output_nodes=frozenset({2}),
        )
        state = LearningState.initial(graph)
        # branch order is (2, 1) then (1, 2)
        state.rates = np.array([3.0, 5.0])
        apply_rates(state, 0.1)
        assert state.weight(1, 2) == pytest.approx(1.5)
        assert state.weight(2, 1) == -1.0

    def test_weight_blowup(self):
        """Test that a weight past the threshold raises WeightBlowup."""
        state = LearningState.initial(chain())
        state.rates = np.array([0.0, 1e14])
        with pytest.raises(WeightBlowup) as exc_info:
            apply_rates(state, 1.0, blowup_threshold=1e12)
        assert exc_info.value.branch == (2, 3)


class TestNeuralNetwork:
    """Test the sigmoid-network learning rule against finite differences."""

    def test_sigmoid(self):
        """Test the logistic function."""
        assert sigmoid(0.0) == 0.5

    def test_network_rates_match_gradient(self):
        """Test nn_weight_rates against -gamma * dE/dw on random networks."""
        rng = np.random.default_rng(2024)
        gamma = 0.8
        for _ in range(50):
            graph, inputs, targets = random_network(rng)
            u, y = evaluate_static(graph, inputs)
            engine = nn_weight_rates(graph, y, u, targets, gamma)
            reference = finite_difference_rates(graph, inputs, targets, gamma, h=1e-5)
            for key, rate in reference.items():
                assert relative_error(engine[key], rate) < 1e-6


class TestGradcheck:
    """Test the gradient check report."""

    def test_relative_error_floor(self):
        """Test that tiny values are compared against 1e-4."""
        assert relative_error(1e-9, 0.0) == pytest.approx(1e-5)
        assert relative_error(2.0, 1.0) == pytest.approx(0.5)

    def test_random_networks_pass(self):
        """Test that the full-solve engine matches finite differences."""
        rng = np.random.default_rng(11)
        for _ in range(20):
            graph, inputs, targets = random_network(rng)
            report = gradcheck(graph, inputs, targets, gamma=1.0)
            assert report.max_rel_error < 1e-6
            assert len(report.rows) == len(graph.adaptive_branches)

    def test_report_table(self):
        """Test the plain-text report."""
        report = gradcheck(chain(), {1: 0.5}, {3: 0.2})
        text = format_gradcheck(report)
        assert text.splitlines()[0].split() == ["branch", "engine", "finite-diff", "rel_error"]
        assert "1->2" in text
        assert text.splitlines()[-1].startswith("max relative error:")
