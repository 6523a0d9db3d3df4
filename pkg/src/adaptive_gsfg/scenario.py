"""
Scenario files and result serialization.

A scenario file is line oriented. Section headers ``[node <id>]``,
``[branch <i> <j>]``, ``[reference]``, ``[input]``, ``[learning]`` and ``[sim]``
are followed by ``key = value`` (or ``key: value``) lines; ``#`` starts a
comment. Values are numbers, ``true``/``false``, bare words, JSON lists,
double-quoted strings (expressions), or ``name=[...]`` groups such as
``tf: num=[1], den=[1, 6, 11, 6]``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import re
from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import IO, Any

import numpy as np

from .config import (
    DEFAULT_ACCEPTANCE_RATIO,
    DEFAULT_BLOWUP_THRESHOLD,
    DEFAULT_DT,
    DEFAULT_DURATION,
    DEFAULT_WINDOW,
    DEFAULT_Y_FLOOR,
    IntegrationScheme,
    LearningConfig,
    LearningMode,
    SimulationConfig,
)
from .dynamics import (
    Constant,
    DcGain,
    Delay,
    Derivative,
    Dynamics,
    FrechetStrategy,
    Identity,
    LinearSS,
    LinearTF,
    NodeSpec,
    NonlinearODE,
    StaticFunction,
    StepResponseHorizon,
    TrajectoryLinearization,
    make_transfer_function,
)
from .errors import (
    Diverged,
    EmptyWindowError,
    ExpressionError,
    ExprSyntaxError,
    ModelError,
    ParseError,
    ScenarioError,
    SemanticError,
    UnknownFunctionError,
)
from .expr import parse, to_text
from .graph import Branch, BranchKey, GsfgGraph, validate
from .simulator import (
    ExprSignal,
    InputBinding,
    ReferenceModel,
    Sawtooth,
    SignalSpec,
    SimulationTrace,
    Sine,
    Square,
    Step,
    first_window,
    last_window,
    metrics,
)

logger = logging.getLogger(__name__)

SCENARIO_SUFFIX = ".gsfg"


@dataclass(frozen=True)
class Scenario:
    """A complete experiment: graph, reference model, inputs and run settings."""

    name: str
    graph: GsfgGraph
    reference: ReferenceModel
    inputs: tuple[InputBinding, ...]
    learning: LearningConfig = field(default_factory=LearningConfig)
    sim: SimulationConfig = field(default_factory=SimulationConfig)
    log_nodes: tuple[int, ...] | None = None
    log_branches: tuple[BranchKey, ...] | None = None

    @property
    def initial_weights(self) -> dict[BranchKey, float]:
        return self.graph.initial_weights()


# Formatting helpers


def format_number(value: float) -> str:
    """
    Shortest plain decimal that reads back as the same float.

    Integral values print without ``.0``; there is never an exponent, so
    ``1e-06`` prints as ``0.000001``. Non-finite values print as ``inf`` or ``nan``.
    """
    value = float(value)
    if not math.isfinite(value):
        return repr(value)
    if value.is_integer() and abs(value) < 1e16:
        return str(int(value))
    return np.format_float_positional(value, unique=True, trim="-")


def _format_list(values) -> str:
    return "[" + ", ".join(format_number(v) for v in values) + "]"


# Parsing

_SECTION_RE = re.compile(r"^\[\s*([A-Za-z_]+)((?:\s+[^\s\]]+)*)\s*\]$")
_KEY_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")
_WORD_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_\-]*$")
_GROUP_RE = re.compile(r"\s*([A-Za-z_]\w*)\s*=\s*(\[[^\]]*\])\s*(?:,|$)")

_SECTION_ARITY = {"node": 1, "branch": 2, "reference": 0, "input": 0, "learning": 0, "sim": 0}


@dataclass
class _Entry:
    value: Any
    line: int
    column: int


@dataclass
class _Section:
    kind: str
    args: tuple[int, ...]
    line: int
    entries: dict[str, _Entry] = field(default_factory=dict)
    used: set[str] = field(default_factory=set)

    @property
    def title(self) -> str:
        return "[" + " ".join([self.kind, *(str(a) for a in self.args)]) + "]"

    def has(self, key: str) -> bool:
        return key in self.entries

    def error(self, message: str, key: str | None = None) -> SemanticError:
        line = self.entries[key].line if key in self.entries else self.line
        return SemanticError(f"line {line}: {self.title}: {message}")

    def raw(self, key: str) -> _Entry | None:
        entry = self.entries.get(key)
        if entry is not None:
            self.used.add(key)
        return entry

    def number(self, key: str, default: float | None = None, required: bool = False) -> float:
        entry = self.raw(key)
        if entry is None:
            if required or default is None:
                raise self.error(f"missing '{key}'")
            return default
        if isinstance(entry.value, bool) or not isinstance(entry.value, int | float):
            raise self.error(f"'{key}' must be a number", key)
        return float(entry.value)

    def optional_number(self, key: str) -> float | None:
        return self.number(key) if self.has(key) else None

    def integer(self, key: str, default: int | None = None) -> int:
        value = self.number(key, None if default is None else float(default))
        if not value.is_integer():
            raise self.error(f"'{key}' must be an integer", key)
        return int(value)

    def boolean(self, key: str, default: bool = False) -> bool:
        entry = self.raw(key)
        if entry is None:
            return default
        if not isinstance(entry.value, bool):
            raise self.error(f"'{key}' must be true or false", key)
        return entry.value

    def word(self, key: str, default: str | None = None) -> str | None:
        entry = self.raw(key)
        if entry is None:
            return default
        if not isinstance(entry.value, str):
            raise self.error(f"'{key}' must be a name or a quoted string", key)
        return entry.value

    def numbers(self, key: str, default: list[float] | None = None) -> list[float]:
        entry = self.raw(key)
        if entry is None:
            if default is None:
                raise self.error(f"missing '{key}'")
            return default
        return _as_numbers(entry.value, lambda msg: self.error(f"'{key}' {msg}", key))

    def expression(self, key: str):
        entry = self.raw(key)
        if entry is None:
            raise self.error(f"missing '{key}'")
        if not isinstance(entry.value, str):
            raise self.error(f"'{key}' must be a quoted expression", key)
        try:
            return parse(entry.value)
        except (ExprSyntaxError, UnknownFunctionError) as exc:
            # +1 skips the opening quote
            raise ParseError(str(exc), entry.line, entry.column + 1 + exc.offset) from None

    def check_unused(self) -> None:
        for key, entry in self.entries.items():
            if key not in self.used:
                raise SemanticError(f"line {entry.line}: {self.title}: unknown key '{key}'")


def _as_numbers(value: Any, fail) -> list[float]:
    if not isinstance(value, list):
        raise fail("must be a list of numbers")
    if any(isinstance(v, bool) or not isinstance(v, int | float) for v in value):
        raise fail("must contain only numbers")
    return [float(v) for v in value]


def _strip_comment(text: str) -> str:
    in_string = False
    for pos, char in enumerate(text):
        if char == '"':
            in_string = not in_string
        elif char == "#" and not in_string:
            return text[:pos]
    return text


def _parse_value(text: str, line: int, column: int) -> Any:
    if not text:
        raise ParseError("missing value", line, column)
    if text[0] in '"[':
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid value: {exc.msg}", line, column + exc.pos) from None
    if text in ("true", "false"):
        return text == "true"
    try:
        return float(text) if any(c in text for c in ".eEn") else int(text)
    except ValueError:
        pass
    if _WORD_RE.match(text):
        return text
    if "=" in text:
        return _parse_group(text, line, column)
    raise ParseError(f"cannot parse value {text!r}", line, column)


def _parse_group(text: str, line: int, column: int) -> dict[str, Any]:
    group: dict[str, Any] = {}
    pos = 0
    while pos < len(text):
        match = _GROUP_RE.match(text, pos)
        if not match:
            raise ParseError("expected name=[...] pairs", line, column + pos)
        try:
            group[match.group(1)] = json.loads(match.group(2))
        except json.JSONDecodeError as exc:
            raise ParseError(
                f"invalid list: {exc.msg}", line, column + match.start(2) + exc.pos
            ) from None
        pos = match.end()
    return group


def _split_key_value(text: str, line: int) -> tuple[str, str, int]:
    separators = [pos for pos in (text.find("="), text.find(":")) if pos >= 0]
    if not separators:
        raise ParseError("expected 'key = value'", line, len(text) - len(text.lstrip()) + 1)
    split = min(separators)
    key = text[:split].strip()
    if not _KEY_RE.match(key):
        raise ParseError(f"invalid key {key!r}", line, len(text) - len(text.lstrip()) + 1)
    rest = text[split + 1 :]
    value = rest.strip()
    column = split + 2 + (len(rest) - len(rest.lstrip()))
    return key, value, column


def _sections(text: str) -> Iterator[_Section]:
    current: _Section | None = None
    for line_no, raw_line in enumerate(text.splitlines(), start=1):
        content = _strip_comment(raw_line).rstrip()
        if not content.strip():
            continue
        stripped = content.strip()
        if stripped.startswith("["):
            match = _SECTION_RE.match(stripped)
            if not match:
                raise ParseError("malformed section header", line_no, 1)
            kind = match.group(1)
            if kind not in _SECTION_ARITY:
                raise ParseError(f"unknown section '{kind}'", line_no, 2)
            try:
                args = tuple(int(arg) for arg in match.group(2).split())
            except ValueError:
                raise ParseError(f"[{kind}] takes integer node ids", line_no, 2) from None
            if len(args) != _SECTION_ARITY[kind]:
                raise ParseError(
                    f"[{kind}] takes {_SECTION_ARITY[kind]} node id(s), got {len(args)}", line_no, 2
                )
            if current is not None:
                yield current
            current = _Section(kind, args, line_no)
            continue
        if current is None:
            raise ParseError("key outside of a section", line_no, 1)
        key, value, column = _split_key_value(content, line_no)
        if key in current.entries:
            raise ParseError(f"duplicate key '{key}'", line_no, 1)
        current.entries[key] = _Entry(_parse_value(value, line_no, column), line_no, column)
    if current is not None:
        yield current


def _transfer_function(section: _Section) -> tuple[list[float], list[float]]:
    entry = section.raw("tf")
    if entry is not None:
        if not isinstance(entry.value, dict) or set(entry.value) != {"num", "den"}:
            raise section.error("'tf' must be 'num=[...], den=[...]'", "tf")
        fail = lambda msg: section.error(f"'tf' {msg}", "tf")  # noqa: E731
        return _as_numbers(entry.value["num"], fail), _as_numbers(entry.value["den"], fail)
    return section.numbers("num"), section.numbers("den")


def _infer_kind(section: _Section) -> str:
    keys = set(section.entries)
    if "expr" in keys:
        return "static"
    if keys & {"tf", "num", "den"}:
        return "tf"
    if "A" in keys:
        return "ss"
    if "tau" in keys:
        return "delay"
    if "h" in keys or "states" in keys or any(re.fullmatch(r"f\d+", k) for k in keys):
        return "ode"
    return "identity"


def _dynamics(section: _Section) -> Dynamics:
    kind = section.word("kind") or _infer_kind(section)
    match kind:
        case "identity":
            return Identity()
        case "static":
            return StaticFunction(section.expression("expr"))
        case "tf":
            num, den = _transfer_function(section)
            return make_transfer_function(num, den, section.optional_number("filter_tau"))
        case "derivative":
            return Derivative(section.optional_number("filter_tau"))
        case "ss":
            entry = section.raw("A")
            if entry is None or not isinstance(entry.value, list):
                raise section.error("'A' must be a list of rows")
            rows = [
                _as_numbers(row, lambda msg: section.error(f"'A' rows {msg}", "A"))
                for row in entry.value
            ]
            return LinearSS(
                A=tuple(tuple(row) for row in rows),
                B=tuple(section.numbers("B", [])),
                C=tuple(section.numbers("C", [])),
                D=section.number("D", 0.0),
                x0=tuple(section.numbers("x0", [])),
            )
        case "ode":
            count = section.integer("states", 0) or sum(
                1 for key in section.entries if re.fullmatch(r"f\d+", key)
            )
            f = tuple(section.expression(f"f{i}") for i in range(1, count + 1))
            return NonlinearODE(f=f, h=section.expression("h"), x0=tuple(section.numbers("x0", [])))
        case "delay":
            return Delay(section.number("tau", required=True))
    raise section.error(f"unknown node kind '{kind}'", "kind")


def _frechet(section: _Section) -> FrechetStrategy:
    kind = section.word("frechet", "dc_gain")
    match kind:
        case "dc_gain":
            return DcGain()
        case "step_response":
            return StepResponseHorizon(section.number("frechet_horizon", 1.0))
        case "linearize":
            return TrajectoryLinearization(section.integer("linearize_stride", 1))
        case "constant":
            return Constant(section.number("frechet_value", required=True))
    raise section.error(f"unknown Fréchet strategy '{kind}'", "frechet")


def _node(section: _Section) -> tuple[NodeSpec, bool]:
    node_id = section.args[0]
    try:
        node = NodeSpec(node_id, _dynamics(section), _frechet(section))
    except (ModelError, ExpressionError) as exc:
        raise section.error(str(exc)) from None
    return node, section.boolean("output")


def _branch(section: _Section) -> Branch:
    tail, head = section.args
    return Branch(
        tail=tail,
        head=head,
        weight=section.number("weight", 1.0),
        adaptive=section.boolean("adaptive"),
        label=section.word("label"),
    )


def _signal(section: _Section) -> SignalSpec:
    kind = section.word("signal", "step")
    try:
        match kind:
            case "step":
                return Step(section.number("amplitude", 1.0))
            case "square":
                return Square(section.number("amplitude", 1.0), section.number("period", 20.0))
            case "sawtooth":
                return Sawtooth(section.number("amplitude", 1.0), section.number("period", 20.0))
            case "sine":
                return Sine(section.number("amplitude", 1.0), section.number("frequency", 0.05))
            case "expr":
                return ExprSignal(section.expression("expr"))
    except (ModelError, ExpressionError) as exc:
        raise section.error(str(exc)) from None
    raise section.error(f"unknown signal '{kind}'", "signal")


def _reference(section: _Section) -> ReferenceModel:
    num, den = _transfer_function(section)
    try:
        return ReferenceModel(LinearTF(tuple(num), tuple(den)))
    except ModelError as exc:
        raise section.error(str(exc)) from None


def _enum(section: _Section, key: str, enum_type, default):
    value = section.word(key)
    if value is None:
        return default
    try:
        return enum_type(value)
    except ValueError:
        choices = ", ".join(member.value for member in enum_type)
        raise section.error(f"'{key}' must be one of {choices}", key) from None


def _learning(section: _Section | None) -> LearningConfig:
    if section is None:
        return LearningConfig()
    config = LearningConfig(
        gamma=section.number("gamma", 1.0),
        mode=_enum(section, "mode", LearningMode, LearningMode.TRUNCATED),
        y_floor=section.number("y_floor", DEFAULT_Y_FLOOR),
        det_tol=section.optional_number("det_tol"),
        blowup_threshold=section.number("blowup_threshold", DEFAULT_BLOWUP_THRESHOLD),
    )
    if not config.gamma >= 0:
        raise section.error("'gamma' must be non-negative", "gamma")
    if not config.y_floor > 0:
        raise section.error("'y_floor' must be positive", "y_floor")
    return config


def _sim(section: _Section | None) -> tuple[SimulationConfig, dict[str, Any]]:
    if section is None:
        return SimulationConfig(), {}
    config = SimulationConfig(
        duration=section.number("duration", DEFAULT_DURATION),
        dt=section.number("dt", DEFAULT_DT),
        scheme=_enum(section, "scheme", IntegrationScheme, IntegrationScheme.RK4),
        window=section.number("window", DEFAULT_WINDOW),
        acceptance_ratio=section.number("acceptance_ratio", DEFAULT_ACCEPTANCE_RATIO),
    )
    if not config.dt > 0:
        raise section.error("'dt' must be positive", "dt")
    if not config.duration >= config.dt:
        raise section.error("'duration' must be at least one step", "duration")
    extras: dict[str, Any] = {"name": section.word("name")}
    if section.has("log_nodes"):
        extras["log_nodes"] = tuple(int(v) for v in section.numbers("log_nodes"))
    entry = section.raw("log_branches")
    if entry is not None:
        if not isinstance(entry.value, list) or not all(
            isinstance(pair, list) and len(pair) == 2 for pair in entry.value
        ):
            raise section.error("'log_branches' must be a list of [i, j] pairs", "log_branches")
        extras["log_branches"] = tuple((int(i), int(j)) for i, j in entry.value)
    return config, extras


def load_scenario(text: str, name: str = "scenario") -> Scenario:
    """
    Parse and validate a scenario.

    Args:
        text: Scenario file contents
        name: Name used when the file does not set ``[sim] name``

    Raises:
        ParseError: Syntax errors, with line and column
        SemanticError: Unknown nodes, bad coefficient lists, invalid graphs
    """
    nodes: list[NodeSpec] = []
    outputs: set[int] = set()
    branches: list[Branch] = []
    inputs: list[InputBinding] = []
    singles: dict[str, _Section] = {}
    input_sections: list[_Section] = []

    sections = list(_sections(text))
    for section in sections:
        match section.kind:
            case "node":
                node, is_output = _node(section)
                nodes.append(node)
                if is_output:
                    outputs.add(node.id)
            case "branch":
                branches.append(_branch(section))
            case "input":
                input_sections.append(section)
                inputs.append(InputBinding(section.integer("node"), _signal(section)))
            case kind:
                if kind in singles:
                    raise SemanticError(f"line {section.line}: duplicate [{kind}] section")
                singles[kind] = section

    if "reference" not in singles:
        raise SemanticError("missing [reference] section")
    if not inputs:
        raise SemanticError("missing [input] section")
    reference = _reference(singles["reference"])
    learning = _learning(singles.get("learning"))
    sim, extras = _sim(singles.get("sim"))
    for section in sections:
        section.check_unused()

    graph = GsfgGraph(
        nodes=tuple(sorted(nodes, key=lambda n: n.id)),
        branches=tuple(sorted(branches, key=lambda b: b.key)),
        output_nodes=frozenset(outputs),
    )
    report = validate(graph, learning=any(b.adaptive for b in branches))
    if not report.ok:
        raise SemanticError(f"invalid graph: {report}")
    known = set(graph.node_ids)
    for section, binding in zip(input_sections, inputs):
        if binding.node not in known:
            raise section.error(f"unknown node {binding.node}", "node")
    for node_id in extras.get("log_nodes", ()):
        if node_id not in known:
            raise SemanticError(f"log_nodes: unknown node {node_id}")
    branch_keys = {b.key for b in graph.branches}
    for key in extras.get("log_branches", ()):
        if key not in branch_keys:
            raise SemanticError(f"log_branches: unknown branch {key[0]}->{key[1]}")

    scenario = Scenario(
        name=extras.get("name") or name,
        graph=graph,
        reference=reference,
        inputs=tuple(inputs),
        learning=learning,
        sim=sim,
        log_nodes=extras.get("log_nodes"),
        log_branches=extras.get("log_branches"),
    )
    logger.debug(
        f"[SCENARIO] loaded {scenario.name}: {len(graph.nodes)} nodes, "
        f"{len(graph.branches)} branches, {len(graph.adaptive_branches)} adaptive"
    )
    return scenario


def load_scenario_file(path: str | Path) -> Scenario:
    """Load a scenario file; its stem is the default scenario name."""
    path = Path(path)
    return load_scenario(path.read_text(encoding="utf-8"), name=path.stem)


def shipped_scenarios() -> list[str]:
    """Names of the scenarios installed with the package."""
    folder = resources.files("adaptive_gsfg") / "scenarios"
    return sorted(
        entry.name.removesuffix(SCENARIO_SUFFIX)
        for entry in folder.iterdir()
        if entry.name.endswith(SCENARIO_SUFFIX)
    )


def shipped_scenario_path(name: str) -> Path:
    """Filesystem path of a shipped scenario."""
    path = Path(str(resources.files("adaptive_gsfg") / "scenarios" / f"{name}{SCENARIO_SUFFIX}"))
    if not path.is_file():
        raise ScenarioError(f"no shipped scenario named '{name}' (available: {', '.join(shipped_scenarios())})")
    return path


def load_shipped_scenario(name: str) -> Scenario:
    return load_scenario_file(shipped_scenario_path(name))


def resolve_scenario(reference: str) -> Scenario:
    """Load a scenario from a file path, or by name from the shipped scenarios."""
    path = Path(reference)
    if path.is_file():
        return load_scenario_file(path)
    if path.suffix or path.parent != Path("."):
        raise ScenarioError(f"scenario file not found: {reference}")
    return load_shipped_scenario(reference)


# Canonical printing


def _dump_dynamics(dynamics: Dynamics) -> list[str]:
    match dynamics:
        case Identity():
            return ["kind = identity"]
        case StaticFunction(expr):
            return ["kind = static", f"expr = {json.dumps(to_text(expr))}"]
        case LinearTF(num, den):
            return ["kind = tf", f"tf: num={_format_list(num)}, den={_format_list(den)}"]
        case Derivative(filter_tau):
            lines = ["kind = derivative"]
            if filter_tau is not None:
                lines.append(f"filter_tau = {format_number(filter_tau)}")
            return lines
        case LinearSS(A, B, C, D, x0):
            rows = ", ".join(_format_list(row) for row in A)
            return [
                "kind = ss",
                f"A = [{rows}]",
                f"B = {_format_list(B)}",
                f"C = {_format_list(C)}",
                f"D = {format_number(D)}",
                f"x0 = {_format_list(x0)}",
            ]
        case NonlinearODE(f, h, x0):
            lines = ["kind = ode"]
            lines += [f"f{i} = {json.dumps(to_text(expr))}" for i, expr in enumerate(f, start=1)]
            lines += [f"h = {json.dumps(to_text(h))}", f"x0 = {_format_list(x0)}"]
            return lines
        case Delay(tau):
            return ["kind = delay", f"tau = {format_number(tau)}"]
    raise TypeError(f"unknown dynamics {dynamics!r}")


def _dump_frechet(strategy: FrechetStrategy) -> list[str]:
    match strategy:
        case StepResponseHorizon(horizon):
            return ["frechet = step_response", f"frechet_horizon = {format_number(horizon)}"]
        case TrajectoryLinearization(stride):
            return ["frechet = linearize", f"linearize_stride = {stride}"]
        case Constant(value):
            return ["frechet = constant", f"frechet_value = {format_number(value)}"]
    return []


def _dump_signal(spec: SignalSpec) -> list[str]:
    match spec:
        case Step(amplitude):
            return ["signal = step", f"amplitude = {format_number(amplitude)}"]
        case Square(amplitude, period):
            return ["signal = square", f"amplitude = {format_number(amplitude)}", f"period = {format_number(period)}"]
        case Sawtooth(amplitude, period):
            return ["signal = sawtooth", f"amplitude = {format_number(amplitude)}", f"period = {format_number(period)}"]
        case Sine(amplitude, frequency):
            return ["signal = sine", f"amplitude = {format_number(amplitude)}", f"frequency = {format_number(frequency)}"]
        case ExprSignal(expr):
            return ["signal = expr", f"expr = {json.dumps(to_text(expr))}"]
    raise TypeError(f"unknown signal {spec!r}")


def dump_scenario(scenario: Scenario) -> str:
    """Canonical text of a scenario; loading it gives back an equal scenario."""
    sim, learning = scenario.sim, scenario.learning
    lines = [
        "[sim]",
        f"name = {json.dumps(scenario.name)}",
        f"duration = {format_number(sim.duration)}",
        f"dt = {format_number(sim.dt)}",
        f"scheme = {sim.scheme.value}",
        f"window = {format_number(sim.window)}",
        f"acceptance_ratio = {format_number(sim.acceptance_ratio)}",
    ]
    if scenario.log_nodes is not None:
        lines.append(f"log_nodes = {_format_list(scenario.log_nodes)}")
    if scenario.log_branches is not None:
        pairs = ", ".join(f"[{i}, {j}]" for i, j in scenario.log_branches)
        lines.append(f"log_branches = [{pairs}]")

    lines += [
        "",
        "[learning]",
        f"gamma = {format_number(learning.gamma)}",
        f"mode = {learning.mode.value}",
        f"y_floor = {format_number(learning.y_floor)}",
        f"blowup_threshold = {format_number(learning.blowup_threshold)}",
    ]
    if learning.det_tol is not None:
        lines.append(f"det_tol = {format_number(learning.det_tol)}")

    tf = scenario.reference.tf
    lines += ["", "[reference]", f"tf: num={_format_list(tf.num)}, den={_format_list(tf.den)}"]

    for binding in scenario.inputs:
        lines += ["", "[input]", f"node = {binding.node}", *_dump_signal(binding.signal)]

    for node in scenario.graph.nodes:
        lines += ["", f"[node {node.id}]", *_dump_dynamics(node.dynamics), *_dump_frechet(node.frechet)]
        if node.id in scenario.graph.output_nodes:
            lines.append("output = true")

    for branch in scenario.graph.branches:
        lines += [
            "",
            f"[branch {branch.tail} {branch.head}]",
            f"weight = {format_number(branch.weight)}",
            f"adaptive = {'true' if branch.adaptive else 'false'}",
        ]
        if branch.label:
            lines.append(f"label = {json.dumps(branch.label)}")
    return "\n".join(lines) + "\n"


# CSV traces


def _open_text(destination: str | Path | IO[str], mode: str):
    if isinstance(destination, str | Path):
        return open(destination, mode, encoding="utf-8", newline="")
    return _Borrowed(destination)


class _Borrowed:
    """Context manager that leaves a caller-owned stream open."""

    def __init__(self, stream: IO[str]):
        self.stream = stream

    def __enter__(self) -> IO[str]:
        return self.stream

    def __exit__(self, *exc_info) -> None:
        return None


def csv_columns(
    trace: SimulationTrace,
    log_nodes: tuple[int, ...] | None = None,
    log_branches: tuple[BranchKey, ...] | None = None,
) -> tuple[list[str], list[int], list[int]]:
    nodes = list(log_nodes) if log_nodes is not None else list(trace.node_ids)
    keys = list(log_branches) if log_branches is not None else [b.key for b in trace.branches]
    header = ["t", *(f"y_{n}" for n in nodes), *(f"w_{i}_{j}" for i, j in keys), "E"]
    return header, [trace.node_column(n) for n in nodes], [trace.branch_column(k) for k in keys]


def write_csv(
    trace: SimulationTrace,
    destination: str | Path | IO[str],
    log_nodes: tuple[int, ...] | None = None,
    log_branches: tuple[BranchKey, ...] | None = None,
) -> int:
    """
    Write a trace as CSV with header ``t, y_<id>..., w_<i>_<j>..., E``.

    Returns:
        Number of data rows written
    """
    if len(trace) == 0:
        raise ValueError("cannot write an empty trace")
    header, node_cols, branch_cols = csv_columns(trace, log_nodes, log_branches)
    with _open_text(destination, "w") as stream:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(header)
        data = np.column_stack([trace.t, trace.y[:, node_cols], trace.weights[:, branch_cols], trace.error])
        for row in data.tolist():
            writer.writerow([format_number(v) for v in row])
    return len(trace)


def read_csv(source: str | Path | IO[str]) -> tuple[list[str], np.ndarray]:
    """Read a CSV written by ``write_csv`` into its header and a float matrix."""
    with _open_text(source, "r") as stream:
        rows = list(csv.reader(stream))
    if not rows:
        raise ValueError("empty CSV")
    header, body = rows[0], rows[1:]
    data = np.array([[float(v) for v in row] for row in body], dtype=float)
    return header, data.reshape(len(body), len(header))


# Summary


def summarize(
    scenario: Scenario,
    trace: SimulationTrace,
    overrides: Mapping[str, Any] | None = None,
) -> dict[str, str]:
    """Key-value summary of a run, including convergence against the acceptance ratio."""
    summary: dict[str, str] = {
        "scenario": scenario.name,
        "status": trace.status,
    }
    if trace.diverged_at is not None:
        summary["diverged_at"] = format_number(trace.diverged_at)
    summary.update(
        gamma=format_number(scenario.learning.gamma),
        mode=scenario.learning.mode.value,
        dt=format_number(scenario.sim.dt),
        duration=format_number(scenario.sim.duration),
    )

    if len(trace):
        last = len(trace) - 1
        for pos, branch in enumerate(trace.branches):
            if branch.adaptive:
                summary[f"final_{branch.name}"] = format_number(trace.weights[last, pos])
        try:
            window = scenario.sim.window
            first = metrics(trace, first_window(trace, window))
            final = metrics(trace, last_window(trace, window))
            overall = metrics(trace, (float(trace.t[0]), float(trace.t[-1])))
        except EmptyWindowError:
            pass
        else:
            summary["rms_first_window"] = format_number(first.rms_error)
            summary["rms_last_window"] = format_number(final.rms_error)
            summary["max_abs_error"] = format_number(overall.max_abs_error)
            summary["max_abs_error_t"] = format_number(overall.max_abs_error_time)
            if first.rms_error > 0:
                ratio = final.rms_error / first.rms_error
                summary["improvement_ratio"] = format_number(ratio)
                summary["acceptance_ratio"] = format_number(scenario.sim.acceptance_ratio)
                converged = trace.status == "ok" and ratio <= scenario.sim.acceptance_ratio
                summary["converged"] = "true" if converged else "false"

    for key, value in (overrides or {}).items():
        summary[f"override_{key}"] = (
            format_number(value) if isinstance(value, int | float) else str(value)
        )
    return summary


def diverged_summary(scenario: Scenario, exc: Diverged, overrides: Mapping[str, Any] | None = None) -> dict[str, str]:
    """Summary of a run that stopped with a divergence."""
    trace = exc.trace
    if trace is None:
        summary = {"scenario": scenario.name, "status": "diverged"}
        if exc.time is not None:
            summary["diverged_at"] = format_number(exc.time)
    else:
        trace.status = "diverged"
        trace.diverged_at = exc.time
        summary = summarize(scenario, trace, overrides)
    if exc.branch is None:
        return summary
    head = {key: summary.pop(key) for key in ("scenario", "status", "diverged_at") if key in summary}
    return head | {"diverged_branch": f"{exc.branch[0]}->{exc.branch[1]}"} | summary


def write_summary(summary: Mapping[str, str], destination: str | Path | IO[str] | None = None) -> str:
    """Render a summary as ``key: value`` lines and optionally write it out."""
    text = "".join(f"{key}: {value}\n" for key, value in summary.items())
    if destination is not None:
        with _open_text(destination, "w") as stream:
            stream.write(text)
    return text


def summary_from_text(text: str) -> dict[str, str]:
    """Parse a summary document back into a mapping."""
    result = {}
    for line in io.StringIO(text):
        key, _, value = line.rstrip("\n").partition(": ")
        if key:
            result[key] = value
    return result
