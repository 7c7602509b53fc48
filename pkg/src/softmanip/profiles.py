"""Tiny expression grammar for arclength parameter profiles.

Profiles are entered as strings in the config files, e.g. ``1e-1*(1-0.9*s)``
or ``(1-s)*exp(-0.1*s^2/(1-s^2))``, and evaluated vectorized on the grid
nodes.  Supported: numeric literals, the variable ``s``, ``pi``, ``+ - * /``,
powers (``^`` or ``**``), unary signs, ``exp``/``sin``/``cos`` and
parentheses.  The unicode variants of minus, times, divide and pi are
accepted as well.  No attribute access, no names other than the above, and
no Python ``eval`` anywhere.
"""

from __future__ import annotations

import numpy as np

__all__ = ["ProfileExpression", "ProfileSyntaxError"]


class ProfileSyntaxError(ValueError):
    """Malformed profile expression."""


_FUNCS = {"exp": np.exp, "sin": np.sin, "cos": np.cos}

_UNICODE_MAP = str.maketrans({
    "−": "-",   # minus sign
    "×": "*",   # multiplication sign
    "÷": "/",   # division sign
    "π": "p",   # pi, expanded below
})


def _tokenize(text: str):
    text = text.translate(_UNICODE_MAP).replace("p", "pi") if "π" in text else text.translate(_UNICODE_MAP)
    tokens = []
    i = 0
    n = len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
            continue
        if c.isdigit() or (c == "." and i + 1 < n and text[i + 1].isdigit()):
            j = i
            seen_exp = False
            while j < n:
                cj = text[j]
                if cj.isdigit() or cj == ".":
                    j += 1
                elif cj in "eE" and not seen_exp and j + 1 < n and (text[j + 1].isdigit() or text[j + 1] in "+-"):
                    seen_exp = True
                    j += 2 if text[j + 1] in "+-" else 1
                else:
                    break
            try:
                tokens.append(("num", float(text[i:j])))
            except ValueError as exc:
                raise ProfileSyntaxError(f"bad number at position {i}: {text[i:j]!r}") from exc
            i = j
            continue
        if c.isalpha():
            j = i
            while j < n and text[j].isalpha():
                j += 1
            name = text[i:j]
            if name == "s":
                tokens.append(("var", "s"))
            elif name == "pi":
                tokens.append(("num", float(np.pi)))
            elif name in _FUNCS:
                tokens.append(("func", name))
            else:
                raise ProfileSyntaxError(f"unknown name {name!r} in profile expression")
            i = j
            continue
        if c == "*" and i + 1 < n and text[i + 1] == "*":
            tokens.append(("op", "^"))
            i += 2
            continue
        if c in "+-*/^()":
            tokens.append(("op", c))
            i += 1
            continue
        raise ProfileSyntaxError(f"unexpected character {c!r} at position {i}")
    tokens.append(("end", None))
    return tokens


class _Parser:
    def __init__(self, tokens):
        self.tokens = tokens
        self.pos = 0

    def peek(self):
        return self.tokens[self.pos]

    def take(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect_op(self, op):
        kind, val = self.take()
        if kind != "op" or val != op:
            raise ProfileSyntaxError(f"expected {op!r}, found {val!r}")

    def parse(self):
        node = self.expr()
        if self.peek()[0] != "end":
            raise ProfileSyntaxError(f"trailing input starting at {self.peek()[1]!r}")
        return node

    def expr(self):
        node = self.term()
        while self.peek() == ("op", "+") or self.peek() == ("op", "-"):
            _, op = self.take()
            node = (op, node, self.term())
        return node

    def term(self):
        node = self.factor()
        while self.peek() == ("op", "*") or self.peek() == ("op", "/"):
            _, op = self.take()
            node = (op, node, self.factor())
        return node

    def factor(self):
        # Unary sign binds looser than the power: -s^2 == -(s^2).
        sign = 1.0
        while self.peek() in (("op", "-"), ("op", "+")):
            _, op = self.take()
            if op == "-":
                sign = -sign
        node = self.power()
        return ("neg", node) if sign < 0 else node

    def power(self):
        node = self.primary()
        if self.peek() == ("op", "^"):
            self.take()
            node = ("^", node, self.factor())  # right associative, signed exponents ok
        return node

    def primary(self):
        kind, val = self.take()
        if kind == "num":
            return ("num", val)
        if kind == "var":
            return ("var",)
        if kind == "func":
            self.expect_op("(")
            arg = self.expr()
            self.expect_op(")")
            return ("call", val, arg)
        if kind == "op" and val == "(":
            node = self.expr()
            self.expect_op(")")
            return node
        raise ProfileSyntaxError(f"unexpected token {val!r}")


def _evaluate(node, s):
    op = node[0]
    if op == "num":
        return node[1]
    if op == "var":
        return s
    if op == "neg":
        return -_evaluate(node[1], s)
    if op == "call":
        return _FUNCS[node[1]](_evaluate(node[2], s))
    a = _evaluate(node[1], s)
    b = _evaluate(node[2], s)
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if op == "/":
        return a / b
    if op == "^":
        return a**b
    raise AssertionError(f"unhandled node {op!r}")


class ProfileExpression:
    """Parsed profile; call it on a scalar or array of arclength values."""

    def __init__(self, text: str):
        self.text = str(text)
        self._ast = _Parser(_tokenize(self.text)).parse()

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            out = _evaluate(self._ast, s)
        out = np.broadcast_to(np.asarray(out, dtype=float), s.shape).copy()
        if not np.all(np.isfinite(out)):
            bad = s[~np.isfinite(out)]
            raise ValueError(
                f"profile {self.text!r} is not finite at s = {bad[:3]}"
            )
        return out if out.ndim else float(out)

    def __repr__(self):
        return f"ProfileExpression({self.text!r})"
