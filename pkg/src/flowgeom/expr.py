"""Arithmetic expression language for user-defined coefficient fields.

Grammar (precedence low to high)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' unary)?          # right-associative
    atom   := NUMBER | IDENT | IDENT '(' expr ')' | '(' expr ')'

Unary minus binds looser than '^', so ``-x1^2`` is ``-(x1^2)``.
Variables are ``x1 .. xn`` (1-based in source, 0-based in the tree).
Functions: sin cos tan exp log sqrt abs tanh.  Constants: pi, e.

Evaluation is plain IEEE double arithmetic and accepts scalar points or
batches (each variable an array); it is deterministic bit-for-bit for a
given input.

>>> evaluate(parse("-x1^2"), [2.0])
-4.0
>>> evaluate(parse("2*x1 + x2^3"), [1.5, 2.0])
11.0
>>> to_source(parse("-(x1 + 1) * x2"))
'-(x1 + 1) * x2'
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import ArityError, DomainError, ExprSyntaxError, UnknownIdentifier

__all__ = [
    "Expr", "Num", "Var", "Const", "Unary", "Binary", "Call",
    "parse", "evaluate", "to_source", "max_var_index",
]


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    index: int  # 0-based


@dataclass(frozen=True)
class Const:
    name: str  # 'pi' or 'e'


@dataclass(frozen=True)
class Unary:
    op: str
    operand: "Expr"


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Call:
    func: str
    arg: "Expr"


Expr = Union[Num, Var, Const, Unary, Binary, Call]

_FUNCS = {
    "sin": np.sin, "cos": np.cos, "tan": np.tan, "exp": np.exp,
    "log": np.log, "sqrt": np.sqrt, "abs": np.abs, "tanh": np.tanh,
}
_CONSTS = {"pi": np.pi, "e": np.e}

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op>[-+*/^(),]))"
)


def _tokenize(source: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        if m is None:
            rest = source[pos:].lstrip()
            if not rest:
                break
            bad = pos + (len(source[pos:]) - len(rest))
            raise ExprSyntaxError(
                f"unexpected character {rest[0]!r} at offset {bad}", offset=bad)
        if m.group("num") is not None:
            tokens.append(("num", m.group("num"), m.start("num")))
        elif m.group("ident") is not None:
            tokens.append(("ident", m.group("ident"), m.start("ident")))
        else:
            tokens.append(("op", m.group("op"), m.start("op")))
        pos = m.end()
    tokens.append(("end", "", len(source)))
    return tokens


class _Parser:
    def __init__(self, source: str):
        self.source = source
        self.tokens = _tokenize(source)
        self.i = 0

    def peek(self) -> tuple[str, str, int]:
        return self.tokens[self.i]

    def advance(self) -> tuple[str, str, int]:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect_op(self, op: str) -> None:
        kind, text, off = self.peek()
        if kind != "op" or text != op:
            raise ExprSyntaxError(
                f"expected {op!r} at offset {off}, found {text or 'end of input'!r}",
                offset=off)
        self.advance()

    def parse(self) -> Expr:
        e = self.expr()
        kind, text, off = self.peek()
        if kind != "end":
            raise ExprSyntaxError(
                f"unexpected {text!r} at offset {off}, expected operator or end",
                offset=off)
        return e

    def expr(self) -> Expr:
        e = self.term()
        while True:
            kind, text, _ = self.peek()
            if kind == "op" and text in "+-":
                self.advance()
                e = Binary(text, e, self.term())
            else:
                return e

    def term(self) -> Expr:
        e = self.unary()
        while True:
            kind, text, _ = self.peek()
            if kind == "op" and text in "*/":
                self.advance()
                e = Binary(text, e, self.unary())
            else:
                return e

    def unary(self) -> Expr:
        kind, text, _ = self.peek()
        if kind == "op" and text == "-":
            self.advance()
            return Unary("-", self.unary())
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        kind, text, _ = self.peek()
        if kind == "op" and text == "^":
            self.advance()
            return Binary("^", base, self.unary())
        return base

    def atom(self) -> Expr:
        kind, text, off = self.advance()
        if kind == "num":
            return Num(float(text))
        if kind == "ident":
            nk, nt, _ = self.peek()
            if nk == "op" and nt == "(":
                if text not in _FUNCS:
                    raise UnknownIdentifier(
                        f"unknown function {text!r} at offset {off}", offset=off)
                self.advance()
                arg = self.expr()
                k2, t2, off2 = self.peek()
                if k2 == "op" and t2 == ",":
                    raise ArityError(
                        f"function {text!r} takes one argument (offset {off2})",
                        offset=off2)
                self.expect_op(")")
                return Call(text, arg)
            if re.fullmatch(r"x[1-9][0-9]*", text):
                return Var(int(text[1:]) - 1)
            if text in _CONSTS:
                return Const(text)
            if text in _FUNCS:
                raise ArityError(
                    f"function {text!r} needs parenthesized argument (offset {off})",
                    offset=off)
            raise UnknownIdentifier(
                f"unknown identifier {text!r} at offset {off}", offset=off)
        if kind == "op" and text == "(":
            e = self.expr()
            self.expect_op(")")
            return e
        raise ExprSyntaxError(
            f"expected number, name, or '(' at offset {off}, found {text or 'end of input'!r}",
            offset=off)


def parse(source: str) -> Expr:
    """Parse a source string into an expression tree."""
    return _Parser(source).parse()


def max_var_index(e: Expr) -> int:
    """Largest variable index used (0-based); -1 if none."""
    if isinstance(e, Var):
        return e.index
    if isinstance(e, Unary):
        return max_var_index(e.operand)
    if isinstance(e, Binary):
        return max(max_var_index(e.left), max_var_index(e.right))
    if isinstance(e, Call):
        return max_var_index(e.arg)
    return -1


def evaluate(e: Expr, point) -> float | np.ndarray:
    """Evaluate at ``point``, a sequence whose k-th entry is ``x{k+1}``.

    Entries may be scalars or equally-shaped arrays (batched evaluation).
    Raises DomainError on log/sqrt outside their domains, division by an
    exact zero, or any non-finite result from finite inputs.
    """
    out = _eval(e, point)
    if isinstance(out, np.ndarray) and out.ndim == 0:
        return float(out)
    return out


def _check_finite(value, what: str):
    if not np.all(np.isfinite(value)):
        raise DomainError(f"{what} produced a non-finite value")
    return value


def _eval(e: Expr, point):
    if isinstance(e, Num):
        return e.value
    if isinstance(e, Const):
        return _CONSTS[e.name]
    if isinstance(e, Var):
        if e.index >= len(point):
            raise ValueError(
                f"expression uses x{e.index + 1} but the point has dimension {len(point)}")
        return np.asarray(point[e.index], dtype=float)
    if isinstance(e, Unary):
        return -_eval(e.operand, point)
    if isinstance(e, Binary):
        lhs = _eval(e.left, point)
        rhs = _eval(e.right, point)
        if e.op == "+":
            return lhs + rhs
        if e.op == "-":
            return lhs - rhs
        if e.op == "*":
            return lhs * rhs
        if e.op == "/":
            if np.any(np.asarray(rhs) == 0.0):
                raise DomainError("division by zero")
            return lhs / rhs
        if e.op == "^":
            with np.errstate(invalid="ignore", divide="ignore"):
                return _check_finite(np.power(lhs, rhs), "power")
        raise AssertionError(e.op)
    if isinstance(e, Call):
        arg = _eval(e.arg, point)
        if e.func == "log" and np.any(np.asarray(arg) <= 0.0):
            raise DomainError("log of a non-positive value")
        if e.func == "sqrt" and np.any(np.asarray(arg) < 0.0):
            raise DomainError("sqrt of a negative value")
        if e.func == "tan":
            return _check_finite(np.tan(arg), "tan")
        return _FUNCS[e.func](arg)
    raise TypeError(f"not an expression node: {e!r}")


_LEVEL = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 4}


def to_source(e: Expr) -> str:
    """Canonical source string; ``parse(to_source(t)) == t`` for any tree."""
    return _print(e, 0)


def _print(e: Expr, parent_level: int) -> str:
    if isinstance(e, Num):
        return repr(e.value)
    if isinstance(e, Const):
        return e.name
    if isinstance(e, Var):
        return f"x{e.index + 1}"
    if isinstance(e, Call):
        return f"{e.func}({_print(e.arg, 0)})"
    if isinstance(e, Unary):
        inner = _print(e.operand, 3)
        text = f"-{inner}"
        return f"({text})" if parent_level > 3 else text
    if isinstance(e, Binary):
        lvl = _LEVEL[e.op]
        if e.op == "^":
            # right-associative; left operand must outrank '^'
            text = f"{_print(e.left, 5)}^{_print(e.right, 4)}"
        else:
            # left-associative; right operand printed at one level tighter
            text = f"{_print(e.left, lvl)} {e.op} {_print(e.right, lvl + 1)}"
        return f"({text})" if parent_level > lvl else text
    raise TypeError(f"not an expression node: {e!r}")
