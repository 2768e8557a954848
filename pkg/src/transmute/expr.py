"""Scalar expression fields over ``z1..zd`` and ``t``.

Model coefficients (drifts, diffusion entries, switching rates, level sets,
boundary data) are written as small arithmetic expressions. This module
tokenizes, parses and evaluates them. Evaluation is vectorized: passing an
``(N, d)`` array of points returns ``N`` values.

Grammar (lowest to highest precedence)::

    expr  := term (('+' | '-') term)*
    term  := unary (('*' | '/') unary)*
    unary := '-' unary | power
    power := atom ('^' unary)?          # right associative
    atom  := NUMBER | NAME | NAME '(' expr (',' expr)* ')' | '(' expr ')'
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

__all__ = [
    "ExprError",
    "ExprSyntaxError",
    "UnknownVariableError",
    "ArityError",
    "ExprEvalError",
    "Node",
    "Num",
    "Var",
    "Neg",
    "BinOp",
    "Call",
    "ExprField",
    "parse_expr",
    "eval_field",
    "FUNCTIONS",
]


class ExprError(ValueError):
    """Base class for expression errors."""


class ExprSyntaxError(ExprError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class UnknownVariableError(ExprSyntaxError):
    pass


class ArityError(ExprSyntaxError):
    pass


class ExprEvalError(ExprError, ArithmeticError):
    """Raised on a domain violation during evaluation (never NaN)."""


# name -> (min arity, max arity)
FUNCTIONS: dict[str, tuple[int, int]] = {
    "exp": (1, 1),
    "log": (1, 1),
    "sin": (1, 1),
    "cos": (1, 1),
    "tanh": (1, 1),
    "sqrt": (1, 1),
    "abs": (1, 1),
    "min": (2, 2),
    "max": (2, 2),
}

CONSTANTS = {"pi": math.pi}

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),]))"
)
_VAR_RE = re.compile(r"z([1-9][0-9]*)$")

Number = Union[float, np.ndarray]


# ---------------------------------------------------------------------------
# Expression tree
# ---------------------------------------------------------------------------


class Node:
    def evaluate(self, env: dict) -> Number:
        raise NotImplementedError

    def to_text(self) -> str:
        raise NotImplementedError

    def variables(self) -> set[str]:
        return set()


@dataclass(frozen=True)
class Num(Node):
    value: float

    def evaluate(self, env):
        return self.value

    def to_text(self):
        if self.value < 0 or (self.value == 0 and math.copysign(1.0, self.value) < 0):
            return f"(-{repr(-self.value)})"
        return repr(self.value)


@dataclass(frozen=True)
class Var(Node):
    name: str

    def evaluate(self, env):
        return env[self.name]

    def to_text(self):
        return self.name

    def variables(self):
        return {self.name} if self.name not in CONSTANTS else set()


@dataclass(frozen=True)
class Neg(Node):
    arg: Node

    def evaluate(self, env):
        return -self.arg.evaluate(env)

    def to_text(self):
        return f"(-{self.arg.to_text()})"

    def variables(self):
        return self.arg.variables()


def _div(a, b):
    if np.any(np.asarray(b) == 0):
        raise ExprEvalError("division by zero")
    return a / b


def _pow(a, b):
    a_arr, b_arr = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    bad_neg = (a_arr < 0) & (b_arr != np.round(b_arr))
    if np.any(bad_neg):
        raise ExprEvalError("negative base raised to a non-integer power")
    if np.any((a_arr == 0) & (b_arr < 0)):
        raise ExprEvalError("zero raised to a negative power")
    with np.errstate(over="ignore"):
        out = np.power(a_arr, b_arr)
    return out if out.ndim else float(out)


_BINOPS: dict[str, Callable] = {
    "+": lambda a, b: a + b,
    "-": lambda a, b: a - b,
    "*": lambda a, b: a * b,
    "/": _div,
    "^": _pow,
}


@dataclass(frozen=True)
class BinOp(Node):
    op: str
    left: Node
    right: Node

    def evaluate(self, env):
        return _BINOPS[self.op](self.left.evaluate(env), self.right.evaluate(env))

    def to_text(self):
        return f"({self.left.to_text()} {self.op} {self.right.to_text()})"

    def variables(self):
        return self.left.variables() | self.right.variables()


def _log(x):
    if np.any(np.asarray(x) <= 0):
        raise ExprEvalError("log of a non-positive value")
    return np.log(x)


def _sqrt(x):
    if np.any(np.asarray(x) < 0):
        raise ExprEvalError("sqrt of a negative value")
    return np.sqrt(x)


def _exp(x):
    with np.errstate(over="ignore"):
        return np.exp(x)


_FUNC_IMPL: dict[str, Callable] = {
    "exp": _exp,
    "log": _log,
    "sin": np.sin,
    "cos": np.cos,
    "tanh": np.tanh,
    "sqrt": _sqrt,
    "abs": np.abs,
    "min": np.minimum,
    "max": np.maximum,
}


@dataclass(frozen=True)
class Call(Node):
    func: str
    args: tuple[Node, ...]

    def evaluate(self, env):
        return _FUNC_IMPL[self.func](*(a.evaluate(env) for a in self.args))

    def to_text(self):
        return f"{self.func}({', '.join(a.to_text() for a in self.args)})"

    def variables(self):
        out: set[str] = set()
        for a in self.args:
            out |= a.variables()
        return out


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


class _Parser:
    def __init__(self, text: str, dimension: int):
        self.text = text
        self.dimension = dimension
        self.tokens = self._tokenize(text)
        self.pos = 0

    @staticmethod
    def _tokenize(text: str) -> list[tuple[str, str, int]]:
        tokens = []
        i = 0
        while i < len(text):
            m = _TOKEN_RE.match(text, i)
            if m is None or m.end() == i:
                if text[i:].strip() == "":
                    break
                j = i
                while text[j].isspace():
                    j += 1
                raise ExprSyntaxError(f"unexpected character {text[j]!r}", j)
            kind = m.lastgroup
            if kind is None:
                break
            tokens.append((kind, m.group(kind), m.start(kind)))
            i = m.end()
        tokens.append(("end", "", len(text)))
        return tokens

    def peek(self):
        return self.tokens[self.pos]

    def advance(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, value: str):
        kind, text, off = self.advance()
        if text != value:
            what = "end of input" if kind == "end" else repr(text)
            raise ExprSyntaxError(f"expected {value!r}, found {what}", off)

    def parse(self) -> Node:
        node = self.expr()
        kind, text, off = self.peek()
        if kind != "end":
            raise ExprSyntaxError(f"unexpected token {text!r}", off)
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.advance()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.advance()[1]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self) -> Node:
        if self.peek()[0] == "op" and self.peek()[1] == "-":
            self.advance()
            return Neg(self.unary())
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.advance()
            return BinOp("^", base, self.unary())
        return base

    def atom(self) -> Node:
        kind, text, off = self.advance()
        if kind == "num":
            return Num(float(text))
        if kind == "name":
            if self.peek()[1] == "(" and self.peek()[0] == "op":
                return self.call(text, off)
            return self.variable(text, off)
        if kind == "op" and text == "(":
            node = self.expr()
            self.expect(")")
            return node
        what = "end of input" if kind == "end" else repr(text)
        raise ExprSyntaxError(f"unexpected {what}", off)

    def call(self, name: str, off: int) -> Node:
        if name not in FUNCTIONS:
            raise UnknownVariableError(f"unknown function {name!r}", off)
        self.expect("(")
        args = [self.expr()]
        while self.peek()[1] == "," and self.peek()[0] == "op":
            self.advance()
            args.append(self.expr())
        self.expect(")")
        lo, hi = FUNCTIONS[name]
        if not lo <= len(args) <= hi:
            raise ArityError(
                f"{name} takes {lo} argument(s), got {len(args)}", off
            )
        return Call(name, tuple(args))

    def variable(self, name: str, off: int) -> Node:
        if name == "t" or name in CONSTANTS:
            return Var(name)
        m = _VAR_RE.match(name)
        if m and int(m.group(1)) <= self.dimension:
            return Var(name)
        raise UnknownVariableError(f"unknown identifier {name!r}", off)


# ---------------------------------------------------------------------------
# Public field type
# ---------------------------------------------------------------------------


class ExprField:
    """A compiled scalar expression over ``z1..zd`` and ``t``.

    Instances are immutable and cheap to share. Call :meth:`evaluate` with a
    point of shape ``(d,)`` (returns a float) or a batch ``(N, d)`` (returns
    an array of length ``N``).
    """

    __slots__ = ("source", "dimension", "tree", "_vars", "_const")

    def __init__(self, source: str, dimension: int, tree: Node):
        self.source = source
        self.dimension = dimension
        self.tree = tree
        self._vars = frozenset(tree.variables())
        self._const = None
        if not self._vars:
            try:
                self._const = float(_finite(tree.evaluate(dict(CONSTANTS))))
            except ExprEvalError:
                pass  # re-raised on every evaluate()

    @property
    def is_constant(self) -> bool:
        return self._const is not None

    @property
    def uses_time(self) -> bool:
        return "t" in self._vars

    def __repr__(self):
        return f"ExprField({self.source!r}, d={self.dimension})"

    def __eq__(self, other):
        return (
            isinstance(other, ExprField)
            and self.tree == other.tree
            and self.dimension == other.dimension
        )

    def __hash__(self):
        return hash((self.tree, self.dimension))

    def to_text(self) -> str:
        return self.tree.to_text()

    def evaluate(self, z, t=0.0):
        z = np.asarray(z, dtype=float)
        if z.shape[-1:] != (self.dimension,) and not (self.dimension == 0 and z.ndim <= 1):
            raise ValueError(
                f"expected points of dimension {self.dimension}, got shape {z.shape}"
            )
        batch = z.shape[:-1]
        if self._const is not None:
            return np.full(batch, self._const) if batch else self._const
        env = dict(CONSTANTS)
        env["t"] = t if np.isscalar(t) else np.asarray(t, dtype=float)
        for name in self._vars:
            if name[0] == "z":
                env[name] = z[..., int(name[1:]) - 1]
        out = _finite(self.tree.evaluate(env))
        if batch:
            return np.array(np.broadcast_to(out, batch), dtype=float)
        return float(out)

    __call__ = evaluate


def _finite(value):
    if not np.all(np.isfinite(value)):
        raise ExprEvalError("non-finite value (overflow or undefined operation)")
    return value


def parse_expr(text: str, dimension: int) -> ExprField:
    """Parse ``text`` into an :class:`ExprField` over ``z1..z{dimension}``."""
    if not isinstance(text, str):
        text = repr(float(text))
    if not text.strip():
        raise ExprSyntaxError("empty expression", 0)
    tree = _Parser(text, dimension).parse()
    return ExprField(text, dimension, tree)


def eval_field(field: ExprField, z: Sequence[float] | np.ndarray, t: float = 0.0):
    return field.evaluate(z, t)
