"""
Expression language for node dynamics and time signals.

Scenario files declare static node functions, nonlinear state equations and
free-form input signals as quoted expressions. This module tokenizes and parses
them with a recursive-descent parser into an immutable AST, prints the AST back
in canonical form, and evaluates it with IEEE float semantics (division by zero
and overflow give infinities instead of exceptions).

Grammar (EBNF)::

    expression = term , { ( "+" | "-" ) , term } ;
    term       = power , { ( "*" | "/" ) , power } ;
    power      = unary , [ "^" , power ] ;
    unary      = ( "-" | "+" ) , unary | primary ;
    primary    = number | call | variable | "(" , expression , ")" ;
    call       = function , "(" , expression , ")" ;
    function   = "sin" | "cos" | "tan" | "exp" | "tanh" | "abs" | "sign" ;
    variable   = "u" | "t" | "x" , digit , { digit } ;
    number     = digits , [ "." , [ digits ] ] , [ exponent ]
               | "." , digits , [ exponent ] ;

Unary minus binds tighter than ``^``, so ``-2^2`` is 4, and ``^`` is
right-associative, so ``2^3^2`` is 512.
"""

from __future__ import annotations

import functools
import math
import re
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass

from .errors import (
    ExprSyntaxError,
    UnboundVariableError,
    UnknownFunctionError,
    UnknownVariableError,
)

__all__ = [
    "BinOp",
    "Call",
    "Expr",
    "FUNCTIONS",
    "Neg",
    "Num",
    "Var",
    "check_variables",
    "compile_expr",
    "derivative",
    "evaluate",
    "finite_difference_step",
    "parse",
    "to_text",
    "variables",
]


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    operand: Expr


@dataclass(frozen=True)
class BinOp:
    op: str
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Call:
    func: str
    arg: Expr


Expr = Num | Var | Neg | BinOp | Call


def _ieee_unary(fn: Callable[[float], float]) -> Callable[[float], float]:
    """Wrap a ``math`` function so overflow gives inf and domain errors give nan."""

    @functools.wraps(fn)
    def wrapper(x: float) -> float:
        try:
            return fn(x)
        except OverflowError:
            return math.inf
        except ValueError:
            return math.nan

    return wrapper


def _sign(x: float) -> float:
    if math.isnan(x):
        return math.nan
    if x == 0.0:
        return 0.0
    return math.copysign(1.0, x)


FUNCTIONS: dict[str, Callable[[float], float]] = {
    "sin": _ieee_unary(math.sin),
    "cos": _ieee_unary(math.cos),
    "tan": _ieee_unary(math.tan),
    "exp": _ieee_unary(math.exp),
    "tanh": math.tanh,
    "abs": abs,
    "sign": _sign,
}


def _div(a: float, b: float) -> float:
    try:
        return a / b
    except ZeroDivisionError:
        if a == 0.0 or math.isnan(a):
            return math.nan
        return math.copysign(math.inf, a) * math.copysign(1.0, b)


def _is_odd_integer(x: float) -> bool:
    return x.is_integer() and int(x) % 2 == 1


def _pow(a: float, b: float) -> float:
    try:
        return math.pow(a, b)
    except OverflowError:
        if a < 0.0 and _is_odd_integer(b):
            return -math.inf
        return math.inf
    except ValueError:
        if a == 0.0 and b < 0.0:
            if _is_odd_integer(b):
                return math.copysign(math.inf, a)
            return math.inf
        return math.nan


def _mul(a: float, b: float) -> float:
    return a * b


def _add(a: float, b: float) -> float:
    return a + b


def _sub(a: float, b: float) -> float:
    return a - b


_BINARY: dict[str, Callable[[float, float], float]] = {
    "+": _add,
    "-": _sub,
    "*": _mul,
    "/": _div,
    "^": _pow,
}

_VARIABLE_RE = re.compile(r"^(u|t|x[1-9][0-9]*)$")

_TOKEN_RE = re.compile(
    r"(?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),])"
)


@dataclass(frozen=True)
class _Token:
    kind: str  # "number" | "name" | "op" | "end"
    text: str
    offset: int


def _tokenize(text: str) -> list[_Token]:
    tokens: list[_Token] = []
    pos = 0
    while pos < len(text):
        if text[pos].isspace():
            pos += 1
            continue
        match = _TOKEN_RE.match(text, pos)
        if not match:
            raise ExprSyntaxError(f"unexpected character {text[pos]!r}", pos)
        kind = match.lastgroup or "op"
        tokens.append(_Token(kind, match.group(), pos))
        pos = match.end()
    tokens.append(_Token("end", "", len(text)))
    return tokens


class _Parser:
    """Recursive-descent parser over a token list."""

    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.index = 0

    @property
    def current(self) -> _Token:
        return self.tokens[self.index]

    def _accept(self, *ops: str) -> _Token | None:
        token = self.current
        if token.kind == "op" and token.text in ops:
            self.index += 1
            return token
        return None

    def _expect(self, op: str) -> None:
        if not self._accept(op):
            token = self.current
            found = "end of expression" if token.kind == "end" else repr(token.text)
            raise ExprSyntaxError(f"unexpected {found}", token.offset, f"'{op}'")

    def parse(self) -> Expr:
        expr = self.expression()
        token = self.current
        if token.kind != "end":
            raise ExprSyntaxError(
                f"unexpected {token.text!r}", token.offset, "operator or end of expression"
            )
        return expr

    def expression(self) -> Expr:
        node = self.term()
        while token := self._accept("+", "-"):
            node = BinOp(token.text, node, self.term())
        return node

    def term(self) -> Expr:
        node = self.power()
        while token := self._accept("*", "/"):
            node = BinOp(token.text, node, self.power())
        return node

    def power(self) -> Expr:
        base = self.unary()
        if self._accept("^"):
            return BinOp("^", base, self.power())
        return base

    def unary(self) -> Expr:
        if self._accept("-"):
            return Neg(self.unary())
        if self._accept("+"):
            return self.unary()
        return self.primary()

    def primary(self) -> Expr:
        token = self.current
        if token.kind == "number":
            self.index += 1
            return Num(float(token.text))
        if token.kind == "name":
            self.index += 1
            if self._accept("("):
                if token.text not in FUNCTIONS:
                    raise UnknownFunctionError(token.text, token.offset)
                arg = self.expression()
                self._expect(")")
                return Call(token.text, arg)
            return Var(token.text)
        if self._accept("("):
            inner = self.expression()
            self._expect(")")
            return inner
        found = "end of expression" if token.kind == "end" else repr(token.text)
        raise ExprSyntaxError(
            f"unexpected {found}",
            token.offset,
            "number, variable, function call or '('",
        )


def parse(text: str) -> Expr:
    """
    Parse expression text into an AST.

    Raises:
        ExprSyntaxError: With the byte offset of the offending token.
        UnknownFunctionError: For calls outside the built-in function set.
    """
    return _Parser(text).parse()


# Printing

_PRECEDENCE = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 3}
_NEG_PRECEDENCE = 4
_ATOM_PRECEDENCE = 5


def _precedence(node: Expr) -> int:
    match node:
        case BinOp(op=op):
            return _PRECEDENCE[op]
        case Neg():
            return _NEG_PRECEDENCE
        case _:
            return _ATOM_PRECEDENCE


def _format_number(value: float) -> str:
    if value.is_integer() and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


def to_text(node: Expr) -> str:
    """Print an AST in canonical form; parsing the result gives the same AST."""

    def wrap(child: Expr, parenthesize: bool) -> str:
        text = to_text(child)
        return f"({text})" if parenthesize else text

    match node:
        case Num(value):
            return _format_number(value)
        case Var(name):
            return name
        case Call(func, arg):
            return f"{func}({to_text(arg)})"
        case Neg(operand):
            return "-" + wrap(operand, _precedence(operand) < _NEG_PRECEDENCE)
        case BinOp("^", left, right):
            left_text = wrap(left, _precedence(left) <= _PRECEDENCE["^"])
            right_text = wrap(right, _precedence(right) < _PRECEDENCE["^"])
            return f"{left_text}^{right_text}"
        case BinOp(op, left, right):
            p = _PRECEDENCE[op]
            left_text = wrap(left, _precedence(left) < p)
            right_text = wrap(right, _precedence(right) <= p)
            return f"{left_text} {op} {right_text}"
    raise TypeError(f"not an expression node: {node!r}")


# Variables


def variables(node: Expr) -> frozenset[str]:
    """Names of all variables referenced by the expression."""
    match node:
        case Var(name):
            return frozenset({name})
        case Neg(operand):
            return variables(operand)
        case BinOp(_, left, right):
            return variables(left) | variables(right)
        case Call(_, arg):
            return variables(arg)
    return frozenset()


def check_variables(node: Expr, allowed: Iterable[str]) -> None:
    """
    Bind-time check that an expression only uses declared variables.

    Raises:
        UnknownVariableError: For the first undeclared or malformed name.
    """
    allowed_set = set(allowed)
    for name in sorted(variables(node)):
        if name not in allowed_set or not _VARIABLE_RE.match(name):
            raise UnknownVariableError(name, allowed_set)


# Evaluation

Compiled = Callable[[Mapping[str, float]], float]


@functools.cache
def compile_expr(node: Expr) -> Compiled:
    """Turn an AST into a closure ``env -> float``; cached per AST."""
    match node:
        case Num(value):
            return lambda env: value
        case Var(name):

            def load(env: Mapping[str, float]) -> float:
                try:
                    return env[name]
                except KeyError:
                    raise UnboundVariableError(name) from None

            return load
        case Neg(operand):
            inner = compile_expr(operand)
            return lambda env: -inner(env)
        case BinOp(op, left, right):
            lhs, rhs, fn = compile_expr(left), compile_expr(right), _BINARY[op]
            return lambda env: fn(lhs(env), rhs(env))
        case Call(func, arg):
            inner, fn = compile_expr(arg), FUNCTIONS[func]
            return lambda env: fn(inner(env))
    raise TypeError(f"not an expression node: {node!r}")


def evaluate(node: Expr, bindings: Mapping[str, float]) -> float:
    """
    Evaluate an expression in 64-bit floating point.

    Raises:
        UnboundVariableError: If a referenced variable has no binding.
    """
    return float(compile_expr(node)(bindings))


def finite_difference_step(value: float) -> float:
    """Central-difference step ``max(1e-6, 1e-6 * |value|)``."""
    return max(1e-6, 1e-6 * abs(value))


def derivative(node: Expr, name: str, bindings: Mapping[str, float]) -> float:
    """Central-difference partial derivative of the expression w.r.t. ``name``."""
    x = bindings[name]
    h = finite_difference_step(x)
    fn = compile_expr(node)
    env = dict(bindings)
    env[name] = x + h
    upper = fn(env)
    env[name] = x - h
    lower = fn(env)
    return (upper - lower) / (2.0 * h)
