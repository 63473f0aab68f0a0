"""Tiny arithmetic grammar for analytic external fields.

A vector field is written "[ey_expr, ex_expr, ez_expr]" style: three comma
separated expressions over x, y, z with +, -, *, /, unary minus, parentheses
and numeric literals. Division clamps denominators with magnitude below 1e-9
(keeping fields finite at their singular sets) and everything evaluates
vectorized over point arrays.
"""
from __future__ import annotations

import re
from typing import Callable

import numpy as np

from .model import ConfigError

DIVISION_FLOOR = 1e-9

_TOKEN = re.compile(
    r"\s*(?:(?P<num>\d+(?:\.\d*)?(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[xyz])"
    r"|(?P<op>[-+*/()]))"
)


def _tokenize(text: str) -> list[tuple[str, str]]:
    tokens = []
    pos = 0
    while pos < len(text):
        match = _TOKEN.match(text, pos)
        if match is None:
            if text[pos:].strip() == "":
                break
            raise ConfigError(f"field expression: unexpected character at '{text[pos:]}'")
        pos = match.end()
        for kind in ("num", "name", "op"):
            value = match.group(kind)
            if value is not None:
                tokens.append((kind, value))
                break
    tokens.append(("end", ""))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.pos = 0

    def peek(self):
        return self.tokens[self.pos]

    def take(self, kind=None, value=None):
        tok = self.tokens[self.pos]
        if kind is not None and tok[0] != kind:
            raise ConfigError(f"field expression: expected {kind}, got '{tok[1] or 'end'}'")
        if value is not None and tok[1] != value:
            raise ConfigError(f"field expression: expected '{value}', got '{tok[1] or 'end'}'")
        self.pos += 1
        return tok

    def parse(self) -> Callable:
        fn = self.expression()
        if self.peek()[0] != "end":
            raise ConfigError(f"field expression: trailing input '{self.peek()[1]}'")
        return fn

    def expression(self):
        left = self.term()
        while self.peek() == ("op", "+") or self.peek() == ("op", "-"):
            op = self.take()[1]
            right = self.term()
            if op == "+":
                left = (lambda a, b: lambda x, y, z: a(x, y, z) + b(x, y, z))(left, right)
            else:
                left = (lambda a, b: lambda x, y, z: a(x, y, z) - b(x, y, z))(left, right)
        return left

    def term(self):
        left = self.unary()
        while self.peek() == ("op", "*") or self.peek() == ("op", "/"):
            op = self.take()[1]
            right = self.unary()
            if op == "*":
                left = (lambda a, b: lambda x, y, z: a(x, y, z) * b(x, y, z))(left, right)
            else:
                left = (lambda a, b: lambda x, y, z: a(x, y, z) / _clamped(b(x, y, z)))(left, right)
        return left

    def unary(self):
        if self.peek() == ("op", "-"):
            self.take()
            inner = self.unary()
            return (lambda a: lambda x, y, z: -a(x, y, z))(inner)
        return self.atom()

    def atom(self):
        kind, value = self.peek()
        if kind == "num":
            self.take()
            const = float(value)
            return lambda x, y, z: np.broadcast_to(np.float64(const), np.shape(x)).copy() if np.ndim(x) else const
        if kind == "name":
            self.take()
            axis = {"x": 0, "y": 1, "z": 2}[value]
            return (lambda a: lambda x, y, z: (x, y, z)[a])(axis)
        if (kind, value) == ("op", "("):
            self.take()
            inner = self.expression()
            self.take("op", ")")
            return inner
        raise ConfigError(f"field expression: unexpected '{value or 'end'}'")


def _clamped(den):
    den = np.asarray(den, dtype=float)
    small = np.abs(den) < DIVISION_FLOOR
    if not np.any(small):
        return den
    sign = np.where(den >= 0.0, 1.0, -1.0)
    return np.where(small, sign * DIVISION_FLOOR, den)


def compile_scalar(text: str) -> Callable:
    """Compile one expression into f(x, y, z) over arrays."""
    return _Parser(text).parse()


def compile_field(text: str, scale: float = 1.0):
    """Compile "[ex, ey, ez]" into a callable mapping (n, 3) points to (n, 3) vectors."""
    stripped = text.strip()
    if not (stripped.startswith("[") and stripped.endswith("]")):
        raise ConfigError("field must be written as [ex, ey, ez]")
    parts = _split_components(stripped[1:-1])
    if len(parts) != 3:
        raise ConfigError("field needs exactly three components")
    fns = [compile_scalar(p) for p in parts]

    def field(points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
        cols = [np.broadcast_to(np.asarray(fn(x, y, z), dtype=float), x.shape) for fn in fns]
        return scale * np.stack(cols, axis=-1)

    return field


def _split_components(body: str) -> list[str]:
    parts = []
    depth = 0
    current = []
    for ch in body:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append("".join(current))
            current = []
        else:
            current.append(ch)
    parts.append("".join(current))
    return [p.strip() for p in parts]
