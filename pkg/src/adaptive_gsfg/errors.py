"""
Exception hierarchy for adaptive GSFG models.

Two families exist. Configuration problems (bad scenario files, malformed
expressions, improper transfer functions) derive from ``ValueError`` and are
reported by the CLI as usage errors. Numerical failures that happen while a
well-formed scenario runs (divergence, singular learning systems, algebraic
loops) derive from ``RuntimeError`` and are reported as scenario failures.
"""

from __future__ import annotations

from typing import TYPE_CHECKING, Any

if TYPE_CHECKING:
    from .simulator import SimulationTrace


class GsfgError(Exception):
    """Base class for all errors raised by this package."""


# Configuration / usage errors


class ScenarioError(GsfgError, ValueError):
    """A scenario could not be loaded or is inconsistent."""


class ParseError(ScenarioError):
    """Syntax error in a scenario file."""

    def __init__(self, message: str, line: int, column: int = 1):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class SemanticError(ScenarioError):
    """A scenario file parsed but references unknown entities or bad values."""


class ExpressionError(GsfgError, ValueError):
    """Base class for expression language errors."""


class ExprSyntaxError(ExpressionError):
    """Malformed expression text."""

    def __init__(self, message: str, offset: int, hint: str | None = None):
        text = f"offset {offset}: {message}"
        if hint:
            text += f" (expected {hint})"
        super().__init__(text)
        self.offset = offset
        self.hint = hint


class UnknownFunctionError(ExpressionError):
    """Call of a function outside the built-in set."""

    def __init__(self, name: str, offset: int):
        super().__init__(f"offset {offset}: unknown function '{name}'")
        self.name = name
        self.offset = offset


class UnknownVariableError(ExpressionError):
    """Expression references a variable its node does not declare."""

    def __init__(self, name: str, allowed: Any):
        super().__init__(
            f"unknown variable '{name}' (declared: {', '.join(sorted(allowed))})"
        )
        self.name = name


class UnboundVariableError(ExpressionError):
    """Evaluation without a value for a referenced variable."""

    def __init__(self, name: str):
        super().__init__(f"variable '{name}' is not bound")
        self.name = name


class ModelError(GsfgError, ValueError):
    """Invalid node dynamics."""


class ImproperTransferFunction(ModelError):
    """Numerator degree exceeds denominator degree."""


class FrechetNotApplicable(ModelError):
    """The requested Fréchet strategy does not apply to the node's dynamics."""


class EmptyWindowError(GsfgError, ValueError):
    """A metrics window selects no samples of the trace."""


# Numerical / scenario failures


class NumericalFault(GsfgError, RuntimeError):
    """A well-formed scenario failed numerically."""


class PoleAtOrigin(NumericalFault):
    """DC gain requested for a system with a pole at s = 0."""

    def __init__(self, node_id: int | None = None):
        where = f"node {node_id}" if node_id is not None else "system"
        super().__init__(f"{where} has a pole at the origin, DC gain is undefined")
        self.node_id = node_id


class Diverged(NumericalFault):
    """A node output or an adaptive weight left the finite range during simulation."""

    def __init__(
        self,
        message: str,
        node_id: int | None = None,
        time: float | None = None,
        last_valid_time: float = 0.0,
        trace: SimulationTrace | None = None,
        branch: tuple[int, int] | None = None,
    ):
        super().__init__(message)
        self.node_id = node_id
        self.time = time
        self.last_valid_time = last_valid_time
        self.trace = trace
        self.branch = branch


class LinearizationFault(NumericalFault):
    """Nonlinear dynamics could not be evaluated around the nominal point."""


class SingularSystem(NumericalFault):
    """``I - Phi`` is singular, so the learning rates are not unique."""

    def __init__(self, determinant: float, topology: str):
        super().__init__(
            f"learning system is singular (det(I - Phi) = {determinant:.3e}); {topology}"
        )
        self.determinant = determinant
        self.topology = topology


class CycleBeyondOutput(NumericalFault):
    """Truncated mode met a cycle that does not pass through an output node."""


class AlgebraicLoop(NumericalFault):
    """A cycle made only of direct-feedthrough nodes."""

    def __init__(self, cycle: list[int]):
        path = " -> ".join(str(n) for n in cycle)
        super().__init__(f"algebraic loop through direct-feedthrough nodes: {path}")
        self.cycle = cycle


class WeightBlowup(NumericalFault):
    """An adaptive weight exceeded the blow-up threshold."""

    def __init__(self, branch: tuple[int, int], value: float):
        super().__init__(
            f"weight of branch {branch[0]}->{branch[1]} blew up to {value:.3e}"
        )
        self.branch = branch
        self.value = value
