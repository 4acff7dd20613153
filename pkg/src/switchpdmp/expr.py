"""Scalar expressions in the state variables ``x1..xd``.

Expressions are immutable trees built from constants, variables, a handful of
unary functions and the four arithmetic operators plus integer powers. They can
be parsed from text, printed back, evaluated, differentiated exactly and
compiled to a flat stack-machine program (see :mod:`switchpdmp._vm`).

Grammar (lowest to highest precedence)::

    expr     := term (("+" | "-") term)*
    term     := unary (("*" | "/") unary)*
    unary    := ("-" | "+") unary | power
    power    := atom ("^" unary)?          # right-associative
    atom     := NUMBER | "x" INT | FUNC "(" expr ")" | "(" expr ")"
    FUNC     := sin | cos | exp | log | sqrt | abs

The right operand of ``^`` must fold to an integer constant.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

__all__ = [
    "Binary",
    "Const",
    "DomainError",
    "ExprSyntaxError",
    "Expression",
    "ExpressionError",
    "NonIntegerExponent",
    "Unary",
    "UnknownVariable",
    "Var",
    "differentiate",
    "evaluate",
    "evaluate_many",
    "is_zero",
    "parse",
    "to_string",
    "variables",
]

UNARY_OPS = ("neg", "sin", "cos", "exp", "log", "sqrt", "abs")
BINARY_OPS = ("add", "sub", "mul", "div", "pow")
FUNCTIONS = ("sin", "cos", "exp", "log", "sqrt", "abs")


class ExpressionError(ValueError):
    """Base class for expression errors."""


class ExprSyntaxError(ExpressionError):
    def __init__(self, position: int, message: str):
        super().__init__(f"syntax error at position {position}: {message}")
        self.position = position
        self.message = message


class UnknownVariable(ExpressionError):
    def __init__(self, name: str, position: int | None = None):
        super().__init__(f"unknown identifier {name!r}")
        self.name = name
        self.position = position


class NonIntegerExponent(ExpressionError):
    pass


class DomainError(ArithmeticError):
    """An intermediate value of an evaluation was not finite."""


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Var:
    index: int  # 1-based


@dataclass(frozen=True)
class Unary:
    op: str
    arg: "Expression"


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Expression"
    right: "Expression"


Expression = Union[Const, Var, Unary, Binary]

ZERO = Const(0.0)
ONE = Const(1.0)


# --------------------------------------------------------------------------
# constructors with constant folding and trivial identities

def _fold_ok(value: float) -> bool:
    return math.isfinite(value)


def neg(a: Expression) -> Expression:
    if isinstance(a, Const):
        return Const(-a.value)
    if isinstance(a, Unary) and a.op == "neg":
        return a.arg
    return Unary("neg", a)


def func(op: str, a: Expression) -> Expression:
    if op == "neg":
        return neg(a)
    if isinstance(a, Const):
        try:
            value = _apply_unary(op, a.value)
        except (ValueError, OverflowError, DomainError):
            value = math.nan
        if _fold_ok(value):
            return Const(value)
    return Unary(op, a)


def add(a: Expression, b: Expression) -> Expression:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value + b.value)
    if is_zero(a):
        return b
    if is_zero(b):
        return a
    return Binary("add", a, b)


def sub(a: Expression, b: Expression) -> Expression:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value - b.value)
    if is_zero(b):
        return a
    if is_zero(a):
        return neg(b)
    return Binary("sub", a, b)


def mul(a: Expression, b: Expression) -> Expression:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value * b.value)
    if is_zero(a) or is_zero(b):
        return ZERO
    if a == ONE:
        return b
    if b == ONE:
        return a
    if a == Const(-1.0):
        return neg(b)
    if b == Const(-1.0):
        return neg(a)
    return Binary("mul", a, b)


def div(a: Expression, b: Expression) -> Expression:
    if isinstance(a, Const) and isinstance(b, Const) and b.value != 0.0:
        value = a.value / b.value
        if _fold_ok(value):
            return Const(value)
    if is_zero(a) and not is_zero(b):
        return ZERO
    if b == ONE:
        return a
    return Binary("div", a, b)


def power(a: Expression, n: int) -> Expression:
    if n == 0:
        return ONE
    if n == 1:
        return a
    if isinstance(a, Const):
        try:
            value = _ipow(a.value, n)
        except DomainError:
            value = math.nan
        if _fold_ok(value):
            return Const(value)
    return Binary("pow", a, Const(float(n)))


def is_zero(e: Expression) -> bool:
    return isinstance(e, Const) and e.value == 0.0


# --------------------------------------------------------------------------
# parsing

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^()]))"
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            stripped = len(text[pos:]) - len(text[pos:].lstrip())
            raise ExprSyntaxError(pos + stripped, f"unexpected character {text[pos + stripped]!r}")
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str, d: int):
        self.text = text
        self.d = d
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self) -> tuple[str, str, int]:
        return self.tokens[self.i]

    def take(self) -> tuple[str, str, int]:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value: str) -> None:
        kind, text, pos = self.take()
        if text != value or kind != "op":
            found = "end of input" if kind == "end" else repr(text)
            raise ExprSyntaxError(pos, f"expected {value!r}, found {found}")

    def parse(self) -> Expression:
        e = self.expr()
        kind, text, pos = self.peek()
        if kind != "end":
            raise ExprSyntaxError(pos, f"unexpected {text!r}")
        return e

    def expr(self) -> Expression:
        e = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            rhs = self.term()
            e = add(e, rhs) if op == "+" else sub(e, rhs)
        return e

    def term(self) -> Expression:
        e = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            rhs = self.unary()
            e = mul(e, rhs) if op == "*" else div(e, rhs)
        return e

    def unary(self) -> Expression:
        kind, text, _ = self.peek()
        if kind == "op" and text == "-":
            self.take()
            return neg(self.unary())
        if kind == "op" and text == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self) -> Expression:
        base = self.atom()
        kind, text, pos = self.peek()
        if kind == "op" and text == "^":
            self.take()
            exponent = self.unary()
            if not isinstance(exponent, Const) or exponent.value != int(exponent.value):
                raise NonIntegerExponent(
                    f"exponent at position {pos + 1} must be a constant integer"
                )
            return power(base, int(exponent.value))
        return base

    def atom(self) -> Expression:
        kind, text, pos = self.take()
        if kind == "num":
            return Const(float(text))
        if kind == "name":
            if text in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return func(text, arg)
            m = re.fullmatch(r"x([1-9][0-9]*)", text)
            if m is None:
                raise UnknownVariable(text, pos)
            k = int(m.group(1))
            if not 1 <= k <= self.d:
                raise UnknownVariable(text, pos)
            return Var(k)
        if kind == "op" and text == "(":
            e = self.expr()
            self.expect(")")
            return e
        found = "end of input" if kind == "end" else repr(text)
        raise ExprSyntaxError(pos, f"unexpected {found}")


def parse(text: str, d: int) -> Expression:
    """Parse ``text`` into an expression over the variables ``x1..xd``."""
    if d < 1:
        raise ValueError("dimension must be positive")
    return _Parser(text, d).parse()


# --------------------------------------------------------------------------
# printing

def to_string(e: Expression) -> str:
    """Fully parenthesised text that parses back to the same tree."""
    if isinstance(e, Const):
        s = repr(float(e.value))
        if s in ("inf", "-inf", "nan"):
            raise DomainError(f"cannot print non-finite constant {s}")
        return f"({s})" if e.value < 0 or s.startswith("-") else s
    if isinstance(e, Var):
        return f"x{e.index}"
    if isinstance(e, Unary):
        if e.op == "neg":
            return f"(-{to_string(e.arg)})"
        return f"{e.op}({to_string(e.arg)})"
    symbol = {"add": "+", "sub": "-", "mul": "*", "div": "/"}
    if e.op == "pow":
        n = int(e.right.value)
        exponent = str(n) if n >= 0 else f"({n})"
        return f"({to_string(e.left)})^{exponent}"
    return f"({to_string(e.left)} {symbol[e.op]} {to_string(e.right)})"


def variables(e: Expression) -> set[int]:
    if isinstance(e, Var):
        return {e.index}
    if isinstance(e, Const):
        return set()
    if isinstance(e, Unary):
        return variables(e.arg)
    return variables(e.left) | variables(e.right)


# --------------------------------------------------------------------------
# evaluation

def _ipow(a: float, n: int) -> float:
    try:
        value = a ** float(n)
    except (ZeroDivisionError, OverflowError) as exc:
        raise DomainError(f"{a}^{n}") from exc
    return value


def _apply_unary(op: str, a: float) -> float:
    if op == "neg":
        return -a
    if op == "sin":
        return math.sin(a)
    if op == "cos":
        return math.cos(a)
    if op == "exp":
        try:
            return math.exp(a)
        except OverflowError as exc:
            raise DomainError(f"exp({a}) overflows") from exc
    if op == "log":
        if a <= 0.0:
            raise DomainError(f"log of non-positive value {a}")
        return math.log(a)
    if op == "sqrt":
        if a < 0.0:
            raise DomainError(f"sqrt of negative value {a}")
        return math.sqrt(a)
    if op == "abs":
        return abs(a)
    raise ValueError(op)


def _eval(e: Expression, x: Sequence[float]) -> float:
    if isinstance(e, Const):
        return e.value
    if isinstance(e, Var):
        return x[e.index - 1]
    if isinstance(e, Unary):
        value = _apply_unary(e.op, _eval(e.arg, x))
    else:
        a = _eval(e.left, x)
        if e.op == "pow":
            value = _ipow(a, int(e.right.value))
        else:
            b = _eval(e.right, x)
            if e.op == "add":
                value = a + b
            elif e.op == "sub":
                value = a - b
            elif e.op == "mul":
                value = a * b
            else:
                if b == 0.0:
                    raise DomainError("division by zero")
                value = a / b
    if not math.isfinite(value):
        raise DomainError(f"non-finite intermediate in {to_string(e)}")
    return value


def evaluate(e: Expression, x: Sequence[float]) -> float:
    """Evaluate ``e`` at the point ``x`` in IEEE double precision.

    Raises:
        DomainError: if any intermediate value is not finite.
    """
    return _eval(e, [float(v) for v in x])


_NP_UNARY = {
    "neg": np.negative,
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
}


def evaluate_many(e: Expression, points: np.ndarray) -> np.ndarray:
    """Vectorised evaluation at the rows of ``points`` (shape ``(n, d)``)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))

    def ev(node: Expression) -> np.ndarray:
        if isinstance(node, Const):
            return np.full(points.shape[0], node.value)
        if isinstance(node, Var):
            return points[:, node.index - 1].copy()
        with np.errstate(all="ignore"):
            if isinstance(node, Unary):
                arg = ev(node.arg)
                if node.op == "log":
                    arg = np.where(arg > 0, arg, np.nan)
                out = _NP_UNARY[node.op](arg)
            else:
                a = ev(node.left)
                if node.op == "pow":
                    out = np.power(a, node.right.value)
                else:
                    b = ev(node.right)
                    if node.op == "add":
                        out = a + b
                    elif node.op == "sub":
                        out = a - b
                    elif node.op == "mul":
                        out = a * b
                    else:
                        out = np.where(b != 0.0, a, np.nan) / np.where(b != 0.0, b, 1.0)
        bad = ~np.isfinite(out)
        if bad.any():
            where = points[int(np.argmax(bad))]
            raise DomainError(f"non-finite value of {to_string(node)} at {where.tolist()}")
        return out

    return ev(e)


# --------------------------------------------------------------------------
# differentiation

def differentiate(e: Expression, k: int) -> Expression:
    """Exact partial derivative of ``e`` with respect to ``x_k`` (1-based)."""
    if k < 1:
        raise ValueError("variable index must be >= 1")
    return _diff(e, k)


def _diff(e: Expression, k: int) -> Expression:
    if isinstance(e, Const):
        return ZERO
    if isinstance(e, Var):
        return ONE if e.index == k else ZERO
    if isinstance(e, Unary):
        a = e.arg
        da = _diff(a, k)
        if is_zero(da):
            return ZERO
        if e.op == "neg":
            return neg(da)
        if e.op == "sin":
            return mul(func("cos", a), da)
        if e.op == "cos":
            return neg(mul(func("sin", a), da))
        if e.op == "exp":
            return mul(e, da)
        if e.op == "log":
            return div(da, a)
        if e.op == "sqrt":
            return div(da, mul(Const(2.0), e))
        if e.op == "abs":
            return mul(div(a, e), da)
        raise ValueError(e.op)
    a, b = e.left, e.right
    if e.op == "pow":
        n = int(b.value)
        da = _diff(a, k)
        return mul(mul(Const(float(n)), power(a, n - 1)), da)
    da, db = _diff(a, k), _diff(b, k)
    if e.op == "add":
        return add(da, db)
    if e.op == "sub":
        return sub(da, db)
    if e.op == "mul":
        return add(mul(da, b), mul(a, db))
    # quotient rule
    if is_zero(db):
        return div(da, b)
    return div(sub(mul(da, b), mul(a, db)), power(b, 2))
