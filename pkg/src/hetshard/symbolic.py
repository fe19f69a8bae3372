"""Symbolic tensor dimensions: rational multiples of a product of symbols."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Sequence

from .errors import InexactDivision, MissingSymbol, NonPositive, ShapeError

_TOKEN = re.compile(r"\s*(?:(\d+)|([A-Za-z_][A-Za-z0-9_']*)|([*/]))")


@dataclass(frozen=True)
class SymDim:
    coeff: Fraction
    symbols: tuple[str, ...] = ()

    @classmethod
    def of(cls, value) -> SymDim:
        if isinstance(value, SymDim):
            return value
        if isinstance(value, bool):
            raise ShapeError(f"bad dimension {value!r}")
        if isinstance(value, int):
            return cls(Fraction(value))
        if isinstance(value, str):
            return cls.parse(value)
        raise ShapeError(f"bad dimension {value!r}")

    @classmethod
    def parse(cls, text: str) -> SymDim:
        pos, coeff, symbols, op = 0, Fraction(1), [], "*"
        text = text.strip()
        if not text:
            raise ShapeError("empty dimension expression")
        expect_factor = True
        while pos < len(text):
            m = _TOKEN.match(text, pos)
            if not m:
                raise ShapeError(f"cannot parse dimension {text!r}")
            pos = m.end()
            num, name, sym = m.groups()
            if expect_factor:
                if sym:
                    raise ShapeError(f"cannot parse dimension {text!r}")
                if num is not None:
                    coeff = coeff * int(num) if op == "*" else coeff / int(num)
                elif op == "*":
                    symbols.append(name)
                else:
                    raise ShapeError(f"division by symbol in {text!r}")
            else:
                if not sym:
                    raise ShapeError(f"cannot parse dimension {text!r}")
                op = sym
            expect_factor = not expect_factor
        if expect_factor:
            raise ShapeError(f"dangling operator in {text!r}")
        return cls(coeff, tuple(sorted(symbols)))

    @property
    def is_literal(self) -> bool:
        return not self.symbols

    def __mul__(self, other) -> SymDim:
        other = SymDim.of(other)
        return SymDim(self.coeff * other.coeff, tuple(sorted(self.symbols + other.symbols)))

    __rmul__ = __mul__

    def __truediv__(self, k: int) -> SymDim:
        return SymDim(self.coeff / k, self.symbols)

    def bind(self, bindings: Mapping[str, int]) -> int:
        value = self.coeff
        for s in self.symbols:
            if s not in bindings:
                raise MissingSymbol(f"symbol {s!r} is not bound")
            value *= int(bindings[s])
        if value.denominator != 1:
            raise InexactDivision(f"{self} evaluates to {value} under {dict(bindings)}")
        if value <= 0:
            raise NonPositive(f"{self} evaluates to {value}")
        return int(value)

    def __str__(self) -> str:
        if not self.symbols:
            return str(self.coeff)
        parts = []
        if self.coeff.numerator != 1:
            parts.append(str(self.coeff.numerator))
        parts.extend(self.symbols)
        body = "*".join(parts)
        if self.coeff.denominator != 1:
            body += f"/{self.coeff.denominator}"
        return body

    def to_json(self):
        return int(self.coeff) if self.is_literal and self.coeff.denominator == 1 else str(self)


Shape = tuple[SymDim, ...]


def as_shape(dims: Sequence) -> Shape:
    return tuple(SymDim.of(d) for d in dims)


def product(dims: Sequence[SymDim]) -> SymDim:
    out = SymDim(Fraction(1))
    for d in dims:
        out = out * d
    return out


def bind_shape(shape: Sequence[SymDim], bindings: Mapping[str, int]) -> tuple[int, ...]:
    return tuple(d.bind(bindings) for d in shape)


def symbols_of(shape: Sequence[SymDim]) -> set[str]:
    return {s for d in shape for s in d.symbols}


def reshape_groups(src: Sequence[SymDim], dst: Sequence[SymDim]) -> list[tuple[list[int], list[int]]]:
    """Pair up runs of source and target dims with equal products.

    Raises ShapeError when the total sizes cannot be matched symbolically.
    """
    groups: list[tuple[list[int], list[int]]] = []
    i = j = 0
    while i < len(src) or j < len(dst):
        gi, gj = [], []
        pi, pj = SymDim(Fraction(1)), SymDim(Fraction(1))
        if i < len(src):
            gi.append(i)
            pi = pi * src[i]
            i += 1
        if j < len(dst):
            gj.append(j)
            pj = pj * dst[j]
            j += 1
        while pi != pj:
            if _smaller(pi, pj) and i < len(src):
                gi.append(i)
                pi = pi * src[i]
                i += 1
            elif j < len(dst):
                gj.append(j)
                pj = pj * dst[j]
                j += 1
            elif i < len(src):
                gi.append(i)
                pi = pi * src[i]
                i += 1
            else:
                raise ShapeError(f"cannot reshape {list(map(str, src))} into {list(map(str, dst))}")
        groups.append((gi, gj))
    return groups


def _smaller(a: SymDim, b: SymDim) -> bool:
    # a divides b symbolically and is strictly smaller
    ca, cb = Counter(a.symbols), Counter(b.symbols)
    if any(ca[s] > cb[s] for s in ca):
        return False
    if ca == cb:
        return a.coeff < b.coeff
    return True
