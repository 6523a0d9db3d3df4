"""Tests for adaptive_gsfg.simulator module."""

import math
from dataclasses import replace

import numpy as np
import pytest

from adaptive_gsfg.config import IntegrationScheme, LearningConfig, LearningMode, SimulationConfig
from adaptive_gsfg.dynamics import Delay, LinearTF, NodeSpec
from adaptive_gsfg.errors import (
    AlgebraicLoop,
    Diverged,
    EmptyWindowError,
    ModelError,
    UnknownVariableError,
    WeightBlowup,
)
from adaptive_gsfg.expr import parse
from adaptive_gsfg.graph import Branch, GsfgGraph
from adaptive_gsfg.scenario import Scenario, load_shipped_scenario
from adaptive_gsfg.simulator import (
    ExprSignal,
    InputBinding,
    ReferenceModel,
    Sawtooth,
    Sine,
    Square,
    Step,
    first_window,
    last_window,
    metrics,
    run,
    signal,
    simulate_reference,
)


def gain_learning(gamma: float = 1.0, mode: LearningMode = LearningMode.TRUNCATED) -> Scenario:
    """Identity input 1 feeding identity output 2 through an adaptive gain; the target is 2."""
    graph = GsfgGraph(
        nodes=(NodeSpec(1), NodeSpec(2)),
        branches=(Branch(1, 2, 0.5, adaptive=True, label="K"),),
        output_nodes=frozenset({2}),
    )
    return Scenario(
        name="gain",
        graph=graph,
        reference=ReferenceModel(LinearTF((2,), (1,))),
        inputs=(InputBinding(1, Step(1.0)),),
        learning=LearningConfig(gamma=gamma, mode=mode),
        sim=SimulationConfig(duration=5.0, dt=0.01, window=1.0),
    )


def open_loop(plant: LinearTF, duration: float, dt: float = 0.01) -> Scenario:
    graph = GsfgGraph(
        nodes=(NodeSpec(1), NodeSpec(2, plant)),
        branches=(Branch(1, 2, 1.0),),
        output_nodes=frozenset({2}),
    )
    return Scenario(
        name="open_loop",
        graph=graph,
        reference=ReferenceModel(LinearTF((1,), (1, 1))),
        inputs=(InputBinding(1, Step(1.0)),),
        learning=LearningConfig(gamma=0.0),
        sim=SimulationConfig(duration=duration, dt=dt, window=1.0),
    )


class TestSignals:
    """Test input signal generators."""

    def test_step(self):
        """Test a constant step."""
        assert signal(Step(2.5), 123.0) == 2.5

    def test_square(self):
        """Test that the square wave starts high and flips at half period."""
        spec = Square(1.0, 20.0)
        assert signal(spec, 0.0) == 1.0
        assert signal(spec, 9.999) == 1.0
        assert signal(spec, 10.0) == -1.0
        assert signal(spec, 20.0) == 1.0

    def test_sawtooth(self):
        """Test the sawtooth ramp from -A to A."""
        spec = Sawtooth(2.0, 4.0)
        assert signal(spec, 0.0) == -2.0
        assert signal(spec, 2.0) == pytest.approx(0.0)
        assert signal(spec, 3.0) == pytest.approx(1.0)

    def test_sine(self):
        """Test the sine generator."""
        assert signal(Sine(3.0, 0.25), 1.0) == pytest.approx(3.0)

    def test_expression_signal(self):
        """Test a free-form signal over t."""
        assert signal(ExprSignal(parse("2*t + 1")), 1.5) == 4.0

    def test_expression_signal_uses_only_time(self):
        """Test that signals may not reference node inputs."""
        with pytest.raises(UnknownVariableError):
            ExprSignal(parse("u + t"))

    def test_non_positive_period(self):
        """Test that periodic signals need a positive period."""
        with pytest.raises(ModelError):
            Square(1.0, 0.0)


class TestRun:
    """Test the fixed-step co-simulation."""

    def test_matching_plant_has_zero_error(self):
        """Test that a plant equal to the reference tracks exactly."""
        trace = run(open_loop(LinearTF((1,), (1, 1)), 2.0))
        assert len(trace) == 200
        np.testing.assert_allclose(trace.error, 0.0, atol=1e-24)
        assert trace.status == "ok"

    def test_target_is_read_before_the_reference_advances(self):
        """Test that target[k] reflects the inputs up to t_{k-1}, like a state-determined output."""
        trace = run(open_loop(LinearTF((1,), (1, 1)), 1.0))
        assert trace.target[0] == 0.0
        assert trace.target[1] == pytest.approx(1.0 - math.exp(-0.01), rel=1e-9)
        np.testing.assert_array_equal(trace.output(2), trace.target)

    def test_time_grid(self):
        """Test that samples sit at t_k = k * dt."""
        trace = run(open_loop(LinearTF((1,), (1, 1)), 1.0, dt=0.1))
        np.testing.assert_allclose(trace.t, np.arange(10) * 0.1)

    def test_gain_converges_to_target(self):
        """Test the exact Euler trajectory of a single adaptive gain."""
        trace = run(gain_learning())
        weights = trace.weight((1, 2))
        assert weights[-1] == pytest.approx(2.0 - 1.5 * 0.99**500, rel=1e-9)
        assert np.all(np.diff(weights) > 0)
        assert trace.target[0] == 2.0

    def test_modes_agree_on_direct_gain(self):
        """Test that truncated and full-solve modes give the same run here."""
        truncated = run(gain_learning(mode=LearningMode.TRUNCATED))
        full = run(gain_learning(mode=LearningMode.FULL_SOLVE))
        np.testing.assert_allclose(truncated.weights, full.weights, rtol=1e-12)

    def test_zero_gamma_freezes_weights(self):
        """Test that gamma = 0 keeps the initial weights."""
        trace = run(gain_learning(gamma=0.0))
        np.testing.assert_array_equal(trace.weight((1, 2)), 0.5)

    def test_inputs_add_up(self):
        """Test that two bindings on one node are summed and the first drives the reference."""
        scenario = gain_learning(gamma=0.0)
        scenario = Scenario(
            name=scenario.name,
            graph=scenario.graph,
            reference=scenario.reference,
            inputs=(InputBinding(1, Step(1.0)), InputBinding(1, Step(0.5))),
            learning=scenario.learning,
            sim=scenario.sim,
        )
        trace = run(scenario)
        assert trace.output(1)[0] == 1.5
        assert trace.target[0] == 2.0

    def test_algebraic_loop(self):
        """Test that a loop of identity nodes is rejected before stepping."""
        graph = GsfgGraph(
            nodes=(NodeSpec(1), NodeSpec(2)),
            branches=(Branch(1, 2, 1.0), Branch(2, 1, 0.5)),
            output_nodes=frozenset({2}),
        )
        scenario = Scenario(
            name="loop",
            graph=graph,
            reference=ReferenceModel(LinearTF((1,), (1,))),
            inputs=(InputBinding(1, Step(1.0)),),
            learning=LearningConfig(gamma=0.0),
            sim=SimulationConfig(duration=1.0, dt=0.1),
        )
        with pytest.raises(AlgebraicLoop):
            run(scenario)

    def test_delay_breaks_algebraic_loop(self):
        """Test that a delay inside a loop makes it computable."""
        graph = GsfgGraph(
            nodes=(NodeSpec(1), NodeSpec(2), NodeSpec(3, Delay(0.1))),
            branches=(Branch(1, 2, 1.0), Branch(2, 3, 1.0), Branch(3, 2, 0.5)),
            output_nodes=frozenset({2}),
        )
        scenario = Scenario(
            name="delayed_loop",
            graph=graph,
            reference=ReferenceModel(LinearTF((2,), (1,))),
            inputs=(InputBinding(1, Step(1.0)),),
            learning=LearningConfig(gamma=0.0),
            sim=SimulationConfig(duration=3.0, dt=0.1),
        )
        trace = run(scenario)
        y2 = trace.output(2)
        assert y2[0] == 1.0
        assert y2[1] == 1.5
        assert y2[-1] == pytest.approx(2.0, abs=1e-6)

    def test_divergence_carries_partial_trace(self):
        """Test that an exploding plant raises Diverged with its time and partial trace."""
        scenario = open_loop(LinearTF((1,), (1, -1)), 40.0)
        with pytest.raises(Diverged) as exc_info:
            run(scenario)
        exc = exc_info.value
        assert exc.node_id == 2
        assert math.log(1e12) < exc.time < 28.5
        assert exc.last_valid_time == pytest.approx(exc.time - 0.01)
        assert exc.trace is not None
        assert len(exc.trace) == int(round(exc.time / 0.01))
        assert np.all(np.isfinite(exc.trace.y))
        assert exc.trace.status == "diverged"
        assert exc.trace.diverged_at == exc.time
        assert exc.branch is None

    def test_weight_blowup_becomes_divergence(self):
        """Test that a runaway gain stops the run with time, branch and the samples before it."""
        with pytest.raises(Diverged) as exc_info:
            run(gain_learning(gamma=1e13))
        exc = exc_info.value
        assert isinstance(exc.__cause__, WeightBlowup)
        assert exc.branch == (1, 2)
        assert exc.node_id is None
        assert exc.time == pytest.approx(0.01)
        assert exc.last_valid_time == pytest.approx(0.0)
        assert "1->2" in str(exc)
        assert len(exc.trace) == 1
        assert exc.trace.status == "diverged"
        assert exc.trace.weight((1, 2))[0] == pytest.approx(0.5 + 0.01 * 1.5e13)

    def test_runs_are_bit_identical(self):
        """Test that running the same scenario twice gives identical traces."""
        scenario = load_shipped_scenario("stable_plant")
        scenario = replace(scenario, sim=replace(scenario.sim, duration=3.0))
        first, second = run(scenario), run(scenario)
        for name in ("t", "u", "y", "frechet", "weights", "rates", "error", "target"):
            assert np.array_equal(getattr(first, name), getattr(second, name)), name
        assert first.diagnostics == second.diagnostics

    def test_fallback_note_in_diagnostics(self):
        """Test that a Fréchet fallback is recorded in the trace."""
        trace = run(open_loop(LinearTF((1,), (1, 0)), 1.0))
        assert any("pole at the origin" in note for note in trace.diagnostics)

    def test_euler_scheme(self):
        """Test that the Euler scheme runs and differs from RK4."""
        rk4 = run(open_loop(LinearTF((1,), (1, 2)), 1.0))
        scenario = open_loop(LinearTF((1,), (1, 2)), 1.0)
        euler = run(
            Scenario(
                name=scenario.name,
                graph=scenario.graph,
                reference=scenario.reference,
                inputs=scenario.inputs,
                learning=scenario.learning,
                sim=SimulationConfig(duration=1.0, dt=0.01, scheme=IntegrationScheme.EULER),
            )
        )
        assert euler.output(2)[-1] != rk4.output(2)[-1]
        assert euler.output(2)[-1] == pytest.approx(rk4.output(2)[-1], rel=1e-2)


class TestSimulateReference:
    """Test the standalone reference model run."""

    def test_first_order_step(self):
        """Test the step response of 1/(s+1) on the grid."""
        t, out = simulate_reference(LinearTF((1,), (1, 1)), Step(1.0), 5.0, 0.01)
        assert out[0] == 0.0
        np.testing.assert_allclose(out, 1.0 - np.exp(-t), atol=1e-9)


class TestMetrics:
    """Test window metrics."""

    def test_windows(self):
        """Test the first and last windows of a trace."""
        trace = run(gain_learning())
        assert first_window(trace, 1.0) == (0.0, 1.0)
        start, end = last_window(trace, 1.0)
        assert end == pytest.approx(4.99)
        assert start == pytest.approx(3.99)

    def test_learning_shrinks_error(self):
        """Test rms, peak error and final weights of the gain run."""
        trace = run(gain_learning())
        first = metrics(trace, first_window(trace, 1.0))
        final = metrics(trace, last_window(trace, 1.0))
        assert final.rms_error < first.rms_error
        assert first.max_abs_error == pytest.approx(1.5)
        assert first.max_abs_error_time == 0.0
        assert final.final_weights[(1, 2)] == trace.weight((1, 2))[-1]
        assert set(final.mean_abs_rates) == {(1, 2)}

    def test_window_edges_are_inclusive(self):
        """Test that grid points on the window edges are counted."""
        trace = run(gain_learning())
        window = metrics(trace, (1.0, 1.0))
        expected = abs(trace.output(2)[100] - trace.target[100])
        assert window.max_abs_error == pytest.approx(expected)
        assert window.rms_error == pytest.approx(expected)

    def test_empty_window(self):
        """Test that a window beyond the run raises EmptyWindowError."""
        trace = run(gain_learning())
        with pytest.raises(EmptyWindowError):
            metrics(trace, (100.0, 200.0))
