"""
Node dynamics, time stepping and Fréchet-derivative strategies.

A node maps its input signal ``u`` to its output ``y``. Static kinds (identity,
static function, backward-difference derivative) do so algebraically; dynamic
kinds (transfer functions, state-space systems, nonlinear ODEs, transport
delays) keep state that is advanced once per fixed step with the input held
constant over the step.
"""

from __future__ import annotations

import functools
import logging
import math
from collections import deque
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sp_signal

from .config import DEFAULT_BLOWUP_THRESHOLD, IntegrationScheme
from .errors import (
    Diverged,
    FrechetNotApplicable,
    ImproperTransferFunction,
    LinearizationFault,
    ModelError,
    PoleAtOrigin,
)
from .expr import (
    Expr,
    check_variables,
    compile_expr,
    derivative,
    finite_difference_step,
    to_text,
    variables,
)

logger = logging.getLogger(__name__)

DEFAULT_DERIVATIVE_FILTER_TAU = 0.01
FALLBACK_HORIZON = 1.0


# Dynamics kinds


@dataclass(frozen=True)
class Identity:
    """``y = u``."""


@dataclass(frozen=True)
class StaticFunction:
    """``y = f(u)`` for an expression over ``u``."""

    expr: Expr

    def __post_init__(self) -> None:
        check_variables(self.expr, {"u"})

    @property
    def text(self) -> str:
        return to_text(self.expr)


@dataclass(frozen=True)
class LinearTF:
    """Transfer function ``num(s)/den(s)``, coefficients in descending powers of s."""

    num: tuple[float, ...]
    den: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "num", tuple(float(c) for c in self.num))
        object.__setattr__(self, "den", tuple(float(c) for c in self.den))
        # Raises on empty, zero-leading or improper coefficient lists
        tf_to_ss(self.num, self.den)


@dataclass(frozen=True)
class LinearSS:
    """
    SISO state-space system ``x' = Ax + Bu, y = Cx + Du``.

    Attributes:
        A: n x n state matrix as nested tuples
        B: Input column of length n
        C: Output row of length n
        D: Direct feedthrough
        x0: Initial state (zeros when empty)
    """

    A: tuple[tuple[float, ...], ...]
    B: tuple[float, ...]
    C: tuple[float, ...]
    D: float = 0.0
    x0: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        A = tuple(tuple(float(v) for v in row) for row in self.A)
        n = len(A)
        if any(len(row) != n for row in A):
            raise ModelError(f"state matrix A must be square, got {n} rows of lengths {[len(r) for r in A]}")
        B = tuple(float(v) for v in self.B)
        C = tuple(float(v) for v in self.C)
        if len(B) != n or len(C) != n:
            raise ModelError(f"B and C must have {n} entries, got {len(B)} and {len(C)}")
        x0 = tuple(float(v) for v in self.x0) or (0.0,) * n
        if len(x0) != n:
            raise ModelError(f"x0 must have {n} entries, got {len(x0)}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "D", float(self.D))
        object.__setattr__(self, "x0", x0)

    @property
    def order(self) -> int:
        return len(self.A)

    def matrices(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
        n = self.order
        return (
            np.array(self.A, dtype=float).reshape(n, n),
            np.array(self.B, dtype=float),
            np.array(self.C, dtype=float),
            self.D,
        )


@dataclass(frozen=True)
class NonlinearODE:
    """``x' = f(x, u), y = h(x, u)`` with states named ``x1..xn``."""

    f: tuple[Expr, ...]
    h: Expr
    x0: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        n = len(self.f)
        if n == 0:
            raise ModelError("nonlinear dynamics need at least one state equation")
        x0 = tuple(float(v) for v in self.x0) or (0.0,) * n
        if len(x0) != n:
            raise ModelError(f"x0 must have {n} entries, got {len(x0)}")
        object.__setattr__(self, "f", tuple(self.f))
        object.__setattr__(self, "x0", x0)
        allowed = {*self.state_names, "u"}
        for expr in (*self.f, self.h):
            check_variables(expr, allowed)

    @property
    def state_names(self) -> tuple[str, ...]:
        return tuple(f"x{i}" for i in range(1, len(self.f) + 1))


@dataclass(frozen=True)
class Delay:
    """Transport delay of ``tau`` seconds with zero initial history."""

    tau: float

    def __post_init__(self) -> None:
        if not self.tau > 0:
            raise ModelError(f"delay must be positive, got {self.tau}")

    def buffer_length(self, dt: float) -> int:
        length = int(round(self.tau / dt))
        if length < 1:
            raise ModelError(f"delay {self.tau} s is shorter than one step of {dt} s")
        return length


@dataclass(frozen=True)
class Derivative:
    """
    Differentiator ``s``.

    Without a filter this is the backward difference ``(u_k - u_{k-1})/dt``;
    with ``filter_tau`` it is the proper transfer function ``s/(tau s + 1)``.
    """

    filter_tau: float | None = None

    def __post_init__(self) -> None:
        if self.filter_tau is not None and not self.filter_tau > 0:
            raise ModelError(f"derivative filter time constant must be positive, got {self.filter_tau}")

    def filtered(self) -> LinearTF | None:
        if self.filter_tau is None:
            return None
        return LinearTF((1.0, 0.0), (self.filter_tau, 1.0))


Dynamics = Identity | StaticFunction | LinearTF | LinearSS | NonlinearODE | Delay | Derivative


# Fréchet strategies


@dataclass(frozen=True)
class DcGain:
    """Approximate the Fréchet derivative by ``lim_{s->0} G(s)``."""


@dataclass(frozen=True)
class StepResponseHorizon:
    """Approximate the Fréchet derivative by the unit step response at ``horizon`` seconds."""

    horizon: float = FALLBACK_HORIZON

    def __post_init__(self) -> None:
        if not self.horizon > 0:
            raise ModelError(f"step response horizon must be positive, got {self.horizon}")


@dataclass(frozen=True)
class TrajectoryLinearization:
    """Linearize along the simulated trajectory every ``stride`` steps and take the DC gain."""

    stride: int = 1

    def __post_init__(self) -> None:
        if self.stride < 1:
            raise ModelError(f"linearization stride must be at least 1, got {self.stride}")


@dataclass(frozen=True)
class Constant:
    """User-supplied Fréchet value."""

    value: float


FrechetStrategy = DcGain | StepResponseHorizon | TrajectoryLinearization | Constant


@dataclass(frozen=True)
class NodeSpec:
    """A graph node: integer id, its dynamics and its Fréchet strategy."""

    id: int
    dynamics: Dynamics = field(default_factory=Identity)
    frechet: FrechetStrategy = field(default_factory=DcGain)

    def __post_init__(self) -> None:
        if isinstance(self.frechet, TrajectoryLinearization) and not isinstance(
            self.dynamics, NonlinearODE
        ):
            raise FrechetNotApplicable(
                f"node {self.id}: trajectory linearization needs nonlinear ODE dynamics"
            )


# Conversions


def _trim_leading_zeros(coefficients: Sequence[float]) -> list[float]:
    values = [float(c) for c in coefficients]
    while len(values) > 1 and values[0] == 0.0:
        values.pop(0)
    return values


def tf_to_ss(num: Sequence[float], den: Sequence[float]) -> LinearSS:
    """
    Realize a proper transfer function in controllable canonical form.

    Args:
        num: Numerator coefficients, descending powers of s
        den: Denominator coefficients, descending powers of s

    Returns:
        LinearSS with the companion matrix of the monic denominator

    Raises:
        ModelError: If the denominator is empty or has a zero leading coefficient
        ImproperTransferFunction: If the numerator degree exceeds the denominator degree
    """
    if len(den) == 0:
        raise ModelError("empty denominator")
    if len(num) == 0:
        raise ModelError("empty numerator")
    if float(den[0]) == 0.0:
        raise ModelError("denominator leading coefficient must be non-zero")
    numerator = _trim_leading_zeros(num)
    if len(numerator) > len(den):
        raise ImproperTransferFunction(
            f"numerator degree {len(numerator) - 1} exceeds denominator degree {len(den) - 1}"
        )

    norm_factor = float(den[0])
    a = np.asarray(den, dtype=float) / norm_factor
    b = np.asarray(numerator, dtype=float) / norm_factor
    n = len(a) - 1
    if len(b) < len(a):
        b = np.pad(b, (len(a) - len(b), 0), "constant")

    A = np.zeros((n, n))
    for i in range(n - 1):
        A[i, i + 1] = 1.0
    if n:
        A[n - 1, :] = -a[1:][::-1]
    B = np.zeros(n)
    if n:
        B[n - 1] = 1.0
    C = b[1:][::-1] - b[0] * a[1:][::-1]
    D = float(b[0])

    return LinearSS(
        A=tuple(tuple(row) for row in A.tolist()),
        B=tuple(B.tolist()),
        C=tuple(C.tolist()),
        D=D,
    )


def ss_to_tf(system: LinearSS) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Expand ``C(sI - A)^-1 B + D`` into monic numerator and denominator coefficients."""
    if system.order == 0:
        return (system.D,), (1.0,)
    A, B, C, D = system.matrices()
    num, den = sp_signal.ss2tf(A, B.reshape(-1, 1), C.reshape(1, -1), np.array([[D]]))
    return tuple(np.atleast_2d(num)[0].tolist()), tuple(np.asarray(den).tolist())


def make_transfer_function(
    num: Sequence[float], den: Sequence[float], filter_tau: float | None = None
) -> LinearTF | Derivative:
    """
    Build transfer-function dynamics, recognizing the pure differentiator.

    ``num = [k, 0], den = [c]`` with ``k/c == 1`` is the improper ``s`` and is
    returned as a Derivative (filtered when ``filter_tau`` is given). Any other
    improper transfer function is rejected.
    """
    numerator = _trim_leading_zeros(num) if len(num) else []
    if len(den) == 1 and len(numerator) == 2 and numerator[1] == 0.0 and den[0] != 0.0:
        if numerator[0] / float(den[0]) != 1.0:
            raise ImproperTransferFunction("only the unit differentiator s may be improper")
        return Derivative(filter_tau=filter_tau)
    return LinearTF(tuple(num), tuple(den))


def as_state_space(dynamics: LinearTF | LinearSS) -> LinearSS:
    if isinstance(dynamics, LinearSS):
        return dynamics
    return _realize(dynamics.num, dynamics.den)


@functools.cache
def _realize(num: tuple[float, ...], den: tuple[float, ...]) -> LinearSS:
    return tf_to_ss(num, den)


def transfer_function_poles(tf: LinearTF) -> np.ndarray:
    """Eigenvalues of the companion matrix, sorted by real then imaginary part."""
    system = as_state_space(tf)
    if system.order == 0:
        return np.array([], dtype=complex)
    A, _, _, _ = system.matrices()
    poles = np.linalg.eigvals(A).astype(complex)
    return poles[np.lexsort((poles.imag, poles.real))]


# Runtime state


@functools.cache
def _propagation(
    A: tuple[tuple[float, ...], ...], B: tuple[float, ...], dt: float, scheme: IntegrationScheme
) -> tuple[np.ndarray, np.ndarray]:
    """
    One-step matrices ``x_{k+1} = M x_k + N u_k`` of a linear system.

    For a linear right-hand side with the input held over the step, applying RK4
    stage by stage collapses to the fourth-order Taylor polynomial of ``exp(A dt)``.
    """
    n = len(A)
    a = np.array(A, dtype=float).reshape(n, n)
    b = np.array(B, dtype=float)
    eye = np.eye(n)
    ha = dt * a
    if scheme is IntegrationScheme.EULER:
        return eye + ha, dt * b
    ha2 = ha @ ha
    ha3 = ha2 @ ha
    m = eye + ha + ha2 / 2.0 + ha3 / 6.0 + ha3 @ ha / 24.0
    n_mat = dt * (eye + ha / 2.0 + ha2 / 6.0 + ha3 / 24.0)
    return m, n_mat @ b


class NodeState:
    """
    Mutable per-run state of one node.

    ``output(u)`` is the node's present output; for nodes without direct
    feedthrough it depends on state only and ``u`` is ignored. ``advance(u)``
    moves the state one step forward with ``u`` held over the step.
    """

    feedthrough = False

    def output(self, u: float) -> float:
        raise NotImplementedError

    def advance(self, u: float) -> None:
        pass

    def step(self, u: float) -> float:
        self.advance(u)
        return self.output(u)


class IdentityState(NodeState):
    feedthrough = True

    def output(self, u: float) -> float:
        return u

    def step(self, u: float) -> float:
        return u


class StaticState(NodeState):
    feedthrough = True

    def __init__(self, dynamics: StaticFunction):
        self._fn = compile_expr(dynamics.expr)

    def output(self, u: float) -> float:
        return float(self._fn({"u": u}))

    def step(self, u: float) -> float:
        return self.output(u)


class LtiState(NodeState):
    """Linear system stepped with precomputed one-step matrices."""

    def __init__(self, system: LinearSS, dt: float, scheme: IntegrationScheme, zero_state: bool = False):
        A, B, C, D = system.matrices()
        self._m, self._n = _propagation(system.A, system.B, dt, scheme)
        self._c = C
        self.d = D
        self.feedthrough = D != 0.0
        self.x = np.zeros(system.order) if zero_state else np.array(system.x0, dtype=float)

    def output(self, u: float) -> float:
        return float(self._c @ self.x) + self.d * u

    def advance(self, u: float) -> None:
        self.x = self._m @ self.x + self._n * u


class OdeState(NodeState):
    """Nonlinear ODE stepped with explicit Euler or classic RK4."""

    def __init__(self, dynamics: NonlinearODE, dt: float, scheme: IntegrationScheme, zero_state: bool = False):
        self._f = [compile_expr(expr) for expr in dynamics.f]
        self._h = compile_expr(dynamics.h)
        self._names = dynamics.state_names
        self._dt = dt
        self._scheme = scheme
        self._env: dict[str, float] = {}
        self.feedthrough = "u" in variables(dynamics.h)
        self.x = [0.0] * len(self._f) if zero_state else list(dynamics.x0)

    def _bind(self, x: Sequence[float], u: float) -> dict[str, float]:
        env = self._env
        for name, value in zip(self._names, x):
            env[name] = value
        env["u"] = u
        return env

    def rates(self, x: Sequence[float], u: float) -> list[float]:
        env = self._bind(x, u)
        return [f(env) for f in self._f]

    def output(self, u: float) -> float:
        return float(self._h(self._bind(self.x, u)))

    def advance(self, u: float) -> None:
        x, h = self.x, self._dt
        k1 = self.rates(x, u)
        if self._scheme is IntegrationScheme.EULER:
            self.x = [xi + h * ki for xi, ki in zip(x, k1)]
            return
        k2 = self.rates([xi + 0.5 * h * ki for xi, ki in zip(x, k1)], u)
        k3 = self.rates([xi + 0.5 * h * ki for xi, ki in zip(x, k2)], u)
        k4 = self.rates([xi + h * ki for xi, ki in zip(x, k3)], u)
        self.x = [
            xi + h / 6.0 * (a + 2.0 * b + 2.0 * c + d)
            for xi, a, b, c, d in zip(x, k1, k2, k3, k4)
        ]


class DelayState(NodeState):
    """Shift register holding the last ``round(tau/dt)`` inputs."""

    def __init__(self, dynamics: Delay, dt: float):
        length = dynamics.buffer_length(dt)
        self.buffer: deque[float] = deque([0.0] * length, maxlen=length)

    def output(self, u: float) -> float:
        return self.buffer[0]

    def advance(self, u: float) -> None:
        # maxlen drops the oldest sample
        self.buffer.append(u)

    def step(self, u: float) -> float:
        y = self.buffer[0]
        self.advance(u)
        return y


class DerivativeState(NodeState):
    """Backward difference with a zero previous input."""

    feedthrough = True

    def __init__(self, dt: float):
        self._dt = dt
        self.previous = 0.0

    def output(self, u: float) -> float:
        return (u - self.previous) / self._dt

    def advance(self, u: float) -> None:
        self.previous = u

    def step(self, u: float) -> float:
        y = self.output(u)
        self.advance(u)
        return y


def initial_state(
    dynamics: Dynamics,
    dt: float,
    scheme: IntegrationScheme = IntegrationScheme.RK4,
    zero_state: bool = False,
) -> NodeState:
    """Create the runtime state of a node, from its declared or from zero initial state."""
    if not dt > 0:
        raise ModelError(f"time step must be positive, got {dt}")
    match dynamics:
        case Identity():
            return IdentityState()
        case StaticFunction():
            return StaticState(dynamics)
        case LinearTF() | LinearSS():
            return LtiState(as_state_space(dynamics), dt, scheme, zero_state)
        case NonlinearODE():
            return OdeState(dynamics, dt, scheme, zero_state)
        case Delay():
            return DelayState(dynamics, dt)
        case Derivative():
            filtered = dynamics.filtered()
            if filtered is not None:
                return LtiState(as_state_space(filtered), dt, scheme, zero_state)
            return DerivativeState(dt)
    raise TypeError(f"unknown dynamics {dynamics!r}")


def step_node(state: NodeState, u: float) -> float:
    """
    Advance a node by one step with input ``u`` and return its output.

    Static kinds return ``y`` immediately, dynamic kinds advance their state and
    then emit ``y``, and a delay pushes ``u`` and pops the sample from ``tau``
    seconds ago.
    """
    return state.step(u)


# Fréchet derivatives


def dc_gain(dynamics: Dynamics, node_id: int | None = None) -> float:
    """
    Steady-state gain ``lim_{s->0} G(s)``.

    Raises:
        PoleAtOrigin: If G has a pole at s = 0
        FrechetNotApplicable: For static functions and nonlinear ODEs
    """
    match dynamics:
        case Identity() | Delay():
            return 1.0
        case Derivative():
            return 0.0
        case LinearTF(num, den):
            if den[-1] == 0.0:
                raise PoleAtOrigin(node_id)
            return num[-1] / den[-1]
        case LinearSS():
            if dynamics.order == 0:
                return dynamics.D
            A, B, C, D = dynamics.matrices()
            try:
                gain = float(C @ np.linalg.solve(-A, B)) + D
            except np.linalg.LinAlgError:
                raise PoleAtOrigin(node_id) from None
            if not math.isfinite(gain):
                raise PoleAtOrigin(node_id)
            return gain
    raise FrechetNotApplicable(
        f"DC gain is undefined for {type(dynamics).__name__} dynamics"
        + (f" of node {node_id}" if node_id is not None else "")
    )


def step_response_value(
    dynamics: Dynamics,
    horizon: float,
    dt: float,
    blowup_threshold: float = DEFAULT_BLOWUP_THRESHOLD,
    node_id: int | None = None,
) -> float:
    """
    Unit step response ``p(T)`` from zero state, integrated with RK4.

    Raises:
        Diverged: If the response exceeds ``blowup_threshold`` before ``horizon``
    """
    if not horizon > 0:
        raise ModelError(f"step response horizon must be positive, got {horizon}")
    state = initial_state(dynamics, dt, IntegrationScheme.RK4, zero_state=True)
    steps = max(int(round(horizon / dt)), 1)
    y = 0.0
    for k in range(steps):
        y = state.step(1.0)
        if not abs(y) <= blowup_threshold:
            t = (k + 1) * dt
            raise Diverged(
                f"step response diverged at t={t:.6g} s",
                node_id=node_id,
                time=t,
                last_valid_time=k * dt,
            )
    return y


def linearize(node: NonlinearODE, x0: Sequence[float], u0: float) -> LinearSS:
    """
    Jacobians of ``f`` and ``h`` at ``(x0, u0)`` by central differences.

    Raises:
        LinearizationFault: If an expression is not finite near the nominal point
    """
    names = node.state_names
    f = [compile_expr(expr) for expr in node.f]
    h = compile_expr(node.h)
    nominal = {name: float(value) for name, value in zip(names, x0)}
    nominal["u"] = float(u0)
    columns = [*names, "u"]

    def jacobian_column(name: str) -> list[float]:
        value = nominal[name]
        step = finite_difference_step(value)
        upper = dict(nominal, **{name: value + step})
        lower = dict(nominal, **{name: value - step})
        column = [(fn(upper) - fn(lower)) / (2.0 * step) for fn in (*f, h)]
        if not all(math.isfinite(entry) for entry in column):
            raise LinearizationFault(
                f"dynamics are not finite around {name}={value:.6g} at the nominal point"
            )
        return column

    jac = np.array([jacobian_column(name) for name in columns]).T
    n = len(names)
    return LinearSS(
        A=tuple(tuple(row) for row in jac[:n, :n].tolist()),
        B=tuple(jac[:n, n].tolist()),
        C=tuple(jac[n, :n].tolist()),
        D=float(jac[n, n]),
    )


class FrechetEvaluator:
    """
    Per-node Fréchet value provider for one simulation run.

    Constant strategies are resolved once at construction; static functions and
    trajectory linearization are evaluated at the current operating point.
    Notes about fallbacks are collected in ``notes``.
    """

    def __init__(
        self,
        node: NodeSpec,
        dt: float,
        blowup_threshold: float = DEFAULT_BLOWUP_THRESHOLD,
    ):
        self.node = node
        self.notes: list[str] = []
        self._dt = dt
        self._blowup_threshold = blowup_threshold
        self._stride = 1
        self._countdown = 0
        self._value = 0.0
        self._dynamic = False
        self._resolve()

    def _resolve(self) -> None:
        node, strategy, dynamics = self.node, self.node.frechet, self.node.dynamics
        match strategy:
            case Constant(value):
                self._value = float(value)
            case _ if isinstance(dynamics, StaticFunction):
                self._dynamic = True
            case TrajectoryLinearization(stride):
                self._dynamic = True
                self._stride = stride
            case StepResponseHorizon(horizon):
                self._value = self._step_response(horizon)
            case DcGain():
                self._value = self._dc_gain_with_fallback()

    def _step_response(self, horizon: float) -> float:
        return step_response_value(
            self.node.dynamics, horizon, self._dt, self._blowup_threshold, node_id=self.node.id
        )

    def _dc_gain_with_fallback(self) -> float:
        dynamics = self.node.dynamics
        try:
            if isinstance(dynamics, NonlinearODE):
                return dc_gain(linearize(dynamics, dynamics.x0, 0.0), self.node.id)
            return dc_gain(dynamics, self.node.id)
        except PoleAtOrigin:
            note = (
                f"node {self.node.id}: pole at the origin, "
                f"falling back to the step response at {FALLBACK_HORIZON:g} s"
            )
            logger.warning(f"[FRECHET] {note}")
            self.notes.append(note)
            return self._step_response(FALLBACK_HORIZON)

    @property
    def dynamic(self) -> bool:
        """Whether the value depends on the node input or state."""
        return self._dynamic

    def __call__(self, state: NodeState, u: float) -> float:
        if not self._dynamic:
            return self._value
        dynamics = self.node.dynamics
        if isinstance(dynamics, StaticFunction):
            return derivative(dynamics.expr, "u", {"u": u})
        if self._countdown == 0:
            assert isinstance(dynamics, NonlinearODE) and isinstance(state, OdeState)
            self._value = dc_gain(linearize(dynamics, state.x, u), self.node.id)
            self._countdown = self._stride
        self._countdown -= 1
        return self._value


def frechet_value(
    node: NodeSpec,
    dt: float,
    u: float = 0.0,
    x: Sequence[float] | None = None,
) -> float:
    """
    Fréchet value of a node under its configured strategy.

    Args:
        node: The node
        dt: Step size for step-response integration
        u: Present input, used by static functions and trajectory linearization
        x: Present state of a nonlinear node (its initial state when omitted)
    """
    state = initial_state(node.dynamics, dt)
    if x is not None and isinstance(state, OdeState):
        state.x = [float(v) for v in x]
    return FrechetEvaluator(node, dt)(state, u)
