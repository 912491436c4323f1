"""Scalar expression language used to ingest coefficient data.

The grammar covers numeric literals, the variables ``x1 .. xN`` and ``t``,
the binary operators ``+ - * / ^`` (with ``^`` binding tightest and
right-associative), unary minus, and the functions ``sin``, ``cos``,
``exp``, ``sqrt``, ``abs``, ``sign``, ``step``, ``min``, ``max``.

Conventions fixed here so that discontinuous coefficients are reproducible
from their textual form alone:

* ``step(u)`` is 1.0 for ``u >= 0`` and 0.0 otherwise (right-continuous),
* ``sign(0) = 0``,
* division by zero and square roots of negative numbers are evaluation
  errors, never parse errors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Expr", "Num", "Var", "Neg", "Bin", "Call",
    "parse_expression", "ExprSyntaxError", "ExprEvalError",
]


class ExprSyntaxError(ValueError):
    """Malformed expression text; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class ExprEvalError(ArithmeticError):
    """Raised when an expression cannot be evaluated at the given point."""


# name -> (min arity, max arity or None for unbounded)
FUNCTIONS = {
    "sin": (1, 1), "cos": (1, 1), "exp": (1, 1), "sqrt": (1, 1),
    "abs": (1, 1), "sign": (1, 1), "step": (1, 1),
    "min": (2, None), "max": (2, None),
}

_SUM, _TERM, _UNARY, _POW, _ATOM = 1, 2, 3, 4, 5


class Expr:
    """Base class for syntax-tree nodes."""

    _prec = _ATOM

    def evaluate(self, env: dict):
        raise NotImplementedError

    def variables(self) -> set:
        return set()

    def uses_t(self) -> bool:
        return "t" in self.variables()

    def max_x_index(self) -> int:
        idx = [int(v[1:]) for v in self.variables() if v != "t"]
        return max(idx) if idx else 0

    def _fmt(self) -> str:
        raise NotImplementedError

    def __str__(self) -> str:
        return self._fmt()

    def _child(self, node: "Expr", min_prec: int) -> str:
        s = node._fmt()
        return f"({s})" if node._prec < min_prec else s


@dataclass(frozen=True)
class Num(Expr):
    """Nonnegative numeric literal (the sign lives in ``Neg``)."""

    value: float
    _prec = _ATOM

    def evaluate(self, env):
        return self.value

    def _fmt(self):
        return repr(self.value)


@dataclass(frozen=True)
class Var(Expr):
    name: str
    _prec = _ATOM

    def evaluate(self, env):
        try:
            return env[self.name]
        except KeyError:
            raise ExprEvalError(
                f"variable {self.name!r} is not defined in this evaluation "
                f"context (dimension too small?)") from None

    def variables(self):
        return {self.name}

    def _fmt(self):
        return self.name


@dataclass(frozen=True)
class Neg(Expr):
    arg: Expr
    _prec = _UNARY

    def evaluate(self, env):
        return -self.arg.evaluate(env)

    def variables(self):
        return self.arg.variables()

    def _fmt(self):
        return "-" + self._child(self.arg, _UNARY)


@dataclass(frozen=True)
class Bin(Expr):
    op: str
    lhs: Expr
    rhs: Expr

    @property
    def _prec(self):  # type: ignore[override]
        return {"+": _SUM, "-": _SUM, "*": _TERM, "/": _TERM, "^": _POW}[self.op]

    def evaluate(self, env):
        a = self.lhs.evaluate(env)
        b = self.rhs.evaluate(env)
        if self.op == "+":
            return a + b
        if self.op == "-":
            return a - b
        if self.op == "*":
            return a * b
        if self.op == "/":
            if np.any(b == 0):
                raise ExprEvalError("division by zero")
            return a / b
        # power: guard domain faults such as 0^-1 and (-2)^0.5
        with np.errstate(all="ignore"):
            r = np.power(np.asarray(a, dtype=float), b)
        if not np.all(np.isfinite(r)):
            raise ExprEvalError("power evaluation left the real domain")
        return r

    def variables(self):
        return self.lhs.variables() | self.rhs.variables()

    def _fmt(self):
        if self.op == "^":
            # right-associative; any non-atom base needs parentheses
            return f"{self._child(self.lhs, _ATOM)} ^ {self._child(self.rhs, _UNARY)}"
        lp = self._prec
        return f"{self._child(self.lhs, lp)} {self.op} {self._child(self.rhs, lp + 1)}"


@dataclass(frozen=True)
class Call(Expr):
    fn: str
    args: tuple
    _prec = _ATOM

    def evaluate(self, env):
        vals = [a.evaluate(env) for a in self.args]
        fn = self.fn
        if fn == "sin":
            return np.sin(vals[0])
        if fn == "cos":
            return np.cos(vals[0])
        if fn == "exp":
            r = np.exp(vals[0])
            if not np.all(np.isfinite(r)):
                raise ExprEvalError("exp overflow")
            return r
        if fn == "sqrt":
            if np.any(np.asarray(vals[0]) < 0):
                raise ExprEvalError("sqrt of a negative number")
            return np.sqrt(vals[0])
        if fn == "abs":
            return np.abs(vals[0])
        if fn == "sign":
            return np.sign(np.asarray(vals[0], dtype=float))
        if fn == "step":
            return np.where(np.asarray(vals[0], dtype=float) >= 0, 1.0, 0.0)
        if fn == "min":
            return np.minimum.reduce(np.broadcast_arrays(*vals))
        if fn == "max":
            return np.maximum.reduce(np.broadcast_arrays(*vals))
        raise ExprEvalError(f"unknown function {fn!r}")  # pragma: no cover

    def variables(self):
        out: set = set()
        for a in self.args:
            out |= a.variables()
        return out

    def _fmt(self):
        return f"{self.fn}({', '.join(a._fmt() for a in self.args)})"


# ----------------------------------------------------------------------------
# tokenizer / parser


@dataclass(frozen=True)
class _Token:
    kind: str  # num | ident | op | lparen | rparen | comma | end
    text: str
    offset: int


def _tokenize(text: str):
    tokens = []
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
            continue
        if c.isdigit() or (c == "." and i + 1 < n and text[i + 1].isdigit()):
            j = i
            seen_dot = False
            while j < n and (text[j].isdigit() or (text[j] == "." and not seen_dot)):
                seen_dot = seen_dot or text[j] == "."
                j += 1
            if j < n and text[j] in "eE":
                k = j + 1
                if k < n and text[k] in "+-":
                    k += 1
                if k < n and text[k].isdigit():
                    j = k
                    while j < n and text[j].isdigit():
                        j += 1
            tokens.append(_Token("num", text[i:j], i))
            i = j
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            tokens.append(_Token("ident", text[i:j], i))
            i = j
            continue
        if c in "+-*/^":
            tokens.append(_Token("op", c, i))
        elif c == "(":
            tokens.append(_Token("lparen", c, i))
        elif c == ")":
            tokens.append(_Token("rparen", c, i))
        elif c == ",":
            tokens.append(_Token("comma", c, i))
        else:
            raise ExprSyntaxError(f"unexpected character {c!r}", i)
        i += 1
    tokens.append(_Token("end", "", n))
    return tokens


def _is_variable_name(name: str) -> bool:
    if name == "t":
        return True
    return (len(name) >= 2 and name[0] == "x" and name[1:].isdigit()
            and name[1] != "0")


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.pos = 0

    def peek(self) -> _Token:
        return self.tokens[self.pos]

    def advance(self) -> _Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, kind: str, text: str | None = None) -> _Token:
        tok = self.peek()
        if tok.kind != kind or (text is not None and tok.text != text):
            raise ExprSyntaxError(
                f"expected {text or kind}, found {tok.text or 'end of input'!r}",
                tok.offset)
        return self.advance()

    def parse(self) -> Expr:
        node = self.sum()
        tok = self.peek()
        if tok.kind != "end":
            raise ExprSyntaxError(f"unexpected trailing {tok.text!r}", tok.offset)
        return node

    def sum(self) -> Expr:
        node = self.term()
        while self.peek().kind == "op" and self.peek().text in "+-":
            op = self.advance().text
            node = Bin(op, node, self.term())
        return node

    def term(self) -> Expr:
        node = self.unary()
        while self.peek().kind == "op" and self.peek().text in "*/":
            op = self.advance().text
            node = Bin(op, node, self.unary())
        return node

    def unary(self) -> Expr:
        if self.peek().kind == "op" and self.peek().text == "-":
            self.advance()
            return Neg(self.unary())
        if self.peek().kind == "op" and self.peek().text == "+":
            self.advance()
            return self.unary()
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self.peek().kind == "op" and self.peek().text == "^":
            self.advance()
            # exponent may carry its own unary minus / chained powers
            return Bin("^", base, self.unary())
        return base

    def atom(self) -> Expr:
        tok = self.peek()
        if tok.kind == "num":
            self.advance()
            return Num(float(tok.text))
        if tok.kind == "lparen":
            self.advance()
            node = self.sum()
            self.expect("rparen")
            return node
        if tok.kind == "ident":
            self.advance()
            if self.peek().kind == "lparen":
                if tok.text not in FUNCTIONS:
                    raise ExprSyntaxError(f"unknown function {tok.text!r}", tok.offset)
                self.advance()
                args = [self.sum()]
                while self.peek().kind == "comma":
                    self.advance()
                    args.append(self.sum())
                self.expect("rparen")
                lo, hi = FUNCTIONS[tok.text]
                if len(args) < lo or (hi is not None and len(args) > hi):
                    raise ExprSyntaxError(
                        f"{tok.text} takes {lo}{'+' if hi is None else ''} "
                        f"argument(s), got {len(args)}", tok.offset)
                return Call(tok.text, tuple(args))
            if not _is_variable_name(tok.text):
                raise ExprSyntaxError(f"unknown identifier {tok.text!r}", tok.offset)
            return Var(tok.text)
        raise ExprSyntaxError(
            f"expected a value, found {tok.text or 'end of input'!r}", tok.offset)


def parse_expression(text: str) -> Expr:
    """Parse ``text`` into a syntax tree.

    Raises ``ExprSyntaxError`` (with byte offset) on malformed input or
    unknown identifiers.  Printing the result with ``str`` and re-parsing
    reproduces the identical tree.
    """
    if not text or not text.strip():
        raise ExprSyntaxError("empty expression", 0)
    return _Parser(text).parse()
