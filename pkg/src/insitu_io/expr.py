"""Scalar arithmetic used by the ``arithmetic`` operator.

Grammar::

    expr    := term (("+" | "-") term)*
    term    := unary (("*" | "/") unary)*
    unary   := ("-" | "+") unary | primary
    primary := NUMBER | SYMBOL | "(" expr ")"

SYMBOL may be namespace-qualified (``ns::name``).  Division by zero is an
error rather than an infinity.
"""

from __future__ import annotations

import re
from functools import lru_cache

import numpy as np

from .errors import ExpressionError

_TOKEN = re.compile(r"""
    \s*(?:
      (?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
    | (?P<sym>[A-Za-z_][A-Za-z0-9_]*(?:::[A-Za-z_][A-Za-z0-9_]*)?)
    | (?P<op>[-+*/()])
    )""", re.VERBOSE)


def _tokenize(text):
    pos, out = 0, []
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise ExpressionError(f"unexpected character at {pos} in {text!r}")
        pos = m.end()
        kind = m.lastgroup
        out.append((kind, m.group(kind)))
    return out


class _Parser:
    def __init__(self, text):
        self.text = text
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.toks[self.i] if self.i < len(self.toks) else (None, None)

    def take(self):
        tok = self.peek()
        self.i += 1
        return tok

    def parse(self):
        if not self.toks:
            raise ExpressionError("empty expression")
        node = self.expr()
        if self.i != len(self.toks):
            raise ExpressionError(f"trailing input in {self.text!r}")
        return node

    def expr(self):
        node = self.term()
        while self.peek() in (("op", "+"), ("op", "-")):
            node = (self.take()[1], node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek() in (("op", "*"), ("op", "/")):
            node = (self.take()[1], node, self.unary())
        return node

    def unary(self):
        if self.peek() == ("op", "-"):
            self.take()
            return ("neg", self.unary())
        if self.peek() == ("op", "+"):
            self.take()
            return self.unary()
        return self.primary()

    def primary(self):
        kind, val = self.take()
        if kind == "num":
            return ("num", float(val))
        if kind == "sym":
            return ("sym", val)
        if (kind, val) == ("op", "("):
            node = self.expr()
            if self.take() != ("op", ")"):
                raise ExpressionError(f"missing ')' in {self.text!r}")
            return node
        raise ExpressionError(f"unexpected token {val!r} in {self.text!r}")


@lru_cache(maxsize=512)
def parse_expression(text: str):
    return _Parser(text).parse()


def symbols(text: str) -> list[str]:
    """Symbols referenced by an expression, in first-appearance order."""
    seen = []

    def walk(node):
        if node[0] == "sym":
            if node[1] not in seen:
                seen.append(node[1])
        elif node[0] == "neg":
            walk(node[1])
        elif node[0] != "num":
            walk(node[1])
            walk(node[2])

    walk(parse_expression(text))
    return seen


def _eval(node, bindings):
    tag = node[0]
    if tag == "num":
        return node[1]
    if tag == "sym":
        try:
            value = np.asarray(bindings[node[1]])
        except KeyError:
            raise ExpressionError(f"unbound symbol {node[1]!r}") from None
        if value.size != 1 or value.dtype.kind not in "fiu":
            raise ExpressionError(f"symbol {node[1]!r} is not a numeric scalar")
        return float(value.reshape(()))
    if tag == "neg":
        return -_eval(node[1], bindings)
    a = _eval(node[1], bindings)
    b = _eval(node[2], bindings)
    if tag == "+":
        return a + b
    if tag == "-":
        return a - b
    if tag == "*":
        return a * b
    if b == 0.0:
        raise ExpressionError("division by zero")
    return a / b


def eval_arithmetic(expr: str, bindings) -> float:
    """Evaluate ``expr`` with standard precedence, left-associative."""
    return _eval(parse_expression(expr), bindings)
