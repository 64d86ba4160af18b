"""Consequent clauses of mined properties.

Variables are signal names, possibly wrapped as ``orig(X)``. Every clause
exposes the variables it reads and a ``holds`` predicate over their values
(all known); invalid values are filtered out by the caller.
"""

from __future__ import annotations

import functools
import re
from dataclasses import dataclass
from typing import Sequence, Union

from .errors import ParseError
from .trace_model import Value, is_orig, orig_name

Constant = Union[int, bytes]

_RANK = {"eq": 0, "const": 1, "inset": 2, "origeq": 3, "cmp": 4, "masked": 5}


def const_key(value: Constant) -> tuple:
    return (1, value) if isinstance(value, bytes) else (0, value)


def format_const(value: Constant) -> str:
    return f'"{value.hex()}"' if isinstance(value, bytes) else str(value)


def is_canonical(value: int, bit: int = 47, width: int = 64) -> bool:
    """Bits ``bit`` .. ``width-1`` all equal."""
    upper = value >> bit
    return upper == 0 or upper == (1 << (width - bit)) - 1


@dataclass(frozen=True)
class Eq:
    left: str
    right: str
    shape = "eq"

    def __post_init__(self):
        if self.left == self.right:
            raise ValueError("Eq needs two distinct variables")
        if self.left > self.right:
            a, b = self.right, self.left
            object.__setattr__(self, "left", a)
            object.__setattr__(self, "right", b)

    @property
    def variables(self) -> tuple[str, ...]:
        return (self.left, self.right)

    def holds(self, values: Sequence[Value]) -> bool:
        return values[0] == values[1]

    def sort_key(self) -> tuple:
        return (_RANK[self.shape], self.variables, ())

    def __str__(self) -> str:
        return f"{self.left} == {self.right}"


@dataclass(frozen=True)
class Const:
    var: str
    value: Constant
    shape = "const"

    @property
    def variables(self) -> tuple[str, ...]:
        return (self.var,)

    def holds(self, values: Sequence[Value]) -> bool:
        return values[0] == self.value

    def sort_key(self) -> tuple:
        return (_RANK[self.shape], self.variables, (const_key(self.value),))

    def __str__(self) -> str:
        return f"{self.var} == {format_const(self.value)}"


@dataclass(frozen=True)
class InSet:
    var: str
    values: tuple[Constant, ...]
    shape = "inset"

    def __post_init__(self):
        vals = tuple(sorted(set(self.values), key=const_key))
        if not 2 <= len(vals) <= 3:
            raise ValueError("InSet needs 2 or 3 distinct constants")
        object.__setattr__(self, "values", vals)

    @property
    def variables(self) -> tuple[str, ...]:
        return (self.var,)

    def holds(self, values: Sequence[Value]) -> bool:
        return values[0] in self.values

    def sort_key(self) -> tuple:
        return (_RANK[self.shape], self.variables, tuple(const_key(v) for v in self.values))

    def __str__(self) -> str:
        return f"{self.var} in {{{', '.join(format_const(v) for v in self.values)}}}"


@dataclass(frozen=True)
class OrigEq:
    signal: str
    shape = "origeq"

    def __post_init__(self):
        if is_orig(self.signal):
            raise ValueError("OrigEq takes the bare signal name")

    @property
    def variables(self) -> tuple[str, ...]:
        return (self.signal, orig_name(self.signal))

    def holds(self, values: Sequence[Value]) -> bool:
        return values[0] == values[1]

    def sort_key(self) -> tuple:
        return (_RANK[self.shape], self.variables, ())

    def __str__(self) -> str:
        return f"{self.signal} == {orig_name(self.signal)}"


@dataclass(frozen=True)
class Cmp:
    left: str
    relation: str
    right: str
    shape = "cmp"

    def __post_init__(self):
        if self.relation not in ("<=", ">="):
            raise ValueError(f"unsupported relation {self.relation!r}")

    @property
    def variables(self) -> tuple[str, ...]:
        return (self.left, self.right)

    def holds(self, values: Sequence[Value]) -> bool:
        a, b = values
        return a <= b if self.relation == "<=" else a >= b

    def sort_key(self) -> tuple:
        return (_RANK[self.shape], self.variables, (self.relation,))

    def __str__(self) -> str:
        return f"{self.left} {self.relation} {self.right}"


@dataclass(frozen=True)
class Masked:
    """``(var & mask) == value``, optionally also requiring canonical form."""

    var: str
    mask: int
    value: int
    canonical: bool = False
    canonical_bit: int = 47
    shape = "masked"

    def __post_init__(self):
        if self.value & ~self.mask:
            raise ValueError("masked value has bits outside the mask")

    @property
    def variables(self) -> tuple[str, ...]:
        return (self.var,)

    def holds(self, values: Sequence[Value]) -> bool:
        v = values[0]
        if isinstance(v, bytes):
            return False
        if (v & self.mask) != self.value:
            return False
        return not self.canonical or is_canonical(v, self.canonical_bit)

    def sort_key(self) -> tuple:
        return (_RANK[self.shape], self.variables, (self.mask, self.value, self.canonical))

    def __str__(self) -> str:
        if self.canonical and self.mask == 0:
            return f"canonical({self.var})"
        if self.canonical:
            return f"canonical({self.var}, {self.mask:#x}, {self.value:#x})"
        return f"({self.var} & {self.mask:#x}) == {self.value:#x}"


Clause = Union[Eq, Const, InSet, OrigEq, Cmp, Masked]


def sort_clauses(clauses) -> list:
    return sorted(clauses, key=lambda c: c.sort_key())


_VAR = r"(?:orig\(\w+\)|\w+)"
_CONST = r'(?:"[0-9a-f]*"|0x[0-9a-f]+|\d+)'


def parse_const(text: str) -> Constant:
    text = text.strip()
    if text.startswith('"'):
        return bytes.fromhex(text.strip('"'))
    return int(text, 0)


_CANON_BARE = re.compile(rf"canonical\(({_VAR})\)")
_CANON = re.compile(rf"canonical\(({_VAR}),\s*(0x[0-9a-f]+),\s*(0x[0-9a-f]+)\)")
_MASKED = re.compile(rf"\(({_VAR})\s*&\s*(0x[0-9a-f]+)\)\s*==\s*(0x[0-9a-f]+)")
_INSET = re.compile(rf"({_VAR})\s+in\s+\{{(.*)\}}")
_CMP = re.compile(rf"({_VAR})\s*(<=|>=)\s*({_VAR})")
_CONST_EQ = re.compile(rf"({_VAR})\s*==\s*({_CONST})")
_VAR_EQ = re.compile(rf"({_VAR})\s*==\s*({_VAR})")


@functools.lru_cache(maxsize=1 << 16)
def parse_clause(text: str) -> Clause:
    # cached: property files repeat the same clause text across labels and points
    t = text.strip()
    m = _CANON_BARE.fullmatch(t)
    if m:
        return Masked(m.group(1), 0, 0, True)
    m = _CANON.fullmatch(t)
    if m:
        return Masked(m.group(1), int(m.group(2), 16), int(m.group(3), 16), True)
    m = _MASKED.fullmatch(t)
    if m:
        return Masked(m.group(1), int(m.group(2), 16), int(m.group(3), 16))
    m = _INSET.fullmatch(t)
    if m:
        return InSet(m.group(1), tuple(parse_const(v) for v in m.group(2).split(",")))
    m = _CMP.fullmatch(t)
    if m:
        return Cmp(m.group(1), m.group(2), m.group(3))
    m = _CONST_EQ.fullmatch(t)
    if m and (m.group(2)[0].isdigit() or m.group(2)[0] == '"'):
        return Const(m.group(1), parse_const(m.group(2)))
    m = _VAR_EQ.fullmatch(t)
    if m:
        a, b = m.group(1), m.group(2)
        if b == orig_name(a):
            return OrigEq(a)
        if a == orig_name(b):
            return OrigEq(b)
        return Eq(a, b)
    raise ParseError(f"cannot parse clause {text!r}")
