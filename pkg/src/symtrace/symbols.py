"""Symbolic dimensions.

A dimension is a monomial: a positive rational coefficient times a product of
named symbols raised to integer exponents.  Model symbols (batch, sequence,
hidden, ...) may carry any exponent; parallel symbols (dp, tp, ...) only ever
appear with exponent -1, because a dimension gets divided by a parallel degree
and never multiplied by one.

Textual form, used in template files and docs/formats.md:

    dim     := [coeff] factor (('*' factor) | ('/' divisor))*
    factor  := IDENT ['^' INT]
    divisor := IDENT | INT
    coeff   := INT

e.g. ``4H``, ``B``, ``2H*kvh/heads``, ``H^2``.  A ``/`` followed by an integer
divides the coefficient; followed by an identifier it divides by that symbol.
Parallel divisors in tensor shape annotations (``B/dp``) are split off by the
template parser into the tensor's Distribution and do not appear in the stored
DimExpr, which stays a pure size expression.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, Iterable, Optional, Tuple

from .errors import (
    DoubleShardError,
    NonIntegralDimError,
    TemplateSyntaxError,
    UnboundSymbolError,
)

MODEL = "model"
PARALLEL = "parallel"


@dataclass(frozen=True, order=True)
class Symbol:
    name: str
    kind: str = MODEL

    def __post_init__(self):
        if self.kind not in (MODEL, PARALLEL):
            raise ValueError(f"bad symbol kind {self.kind!r}")

    def __repr__(self):
        return f"{self.name}" if self.kind == MODEL else f"{self.name}!"


@dataclass(frozen=True)
class DimExpr:
    """coeff * prod(sym^exp).  Immutable and hashable; factors kept sorted."""

    coeff: Fraction
    factors: Tuple[Tuple[Symbol, int], ...] = ()

    @staticmethod
    def const(n) -> "DimExpr":
        c = Fraction(n)
        if c <= 0:
            raise ValueError(f"dimension coefficient must be positive, got {n}")
        return DimExpr(c, ())

    @staticmethod
    def of(sym: Symbol) -> "DimExpr":
        return DimExpr(Fraction(1), ((sym, 1),))

    @staticmethod
    def build(coeff, factors: Dict[Symbol, int]) -> "DimExpr":
        c = Fraction(coeff)
        if c <= 0:
            raise ValueError(f"dimension coefficient must be positive, got {coeff}")
        norm = tuple(sorted(((s, e) for s, e in factors.items() if e != 0),
                            key=lambda p: (p[0].name, p[0].kind)))
        for s, e in norm:
            if s.kind == PARALLEL and e != -1:
                raise DoubleShardError(
                    f"parallel symbol {s.name} must have exponent -1, got {e}")
        return DimExpr(c, norm)

    # -- algebra --

    def mul(self, other: "DimExpr") -> "DimExpr":
        facs = dict(self.factors)
        for s, e in other.factors:
            facs[s] = facs.get(s, 0) + e
        return DimExpr.build(self.coeff * other.coeff, facs)

    def div_parallel(self, sym: Symbol) -> "DimExpr":
        if sym.kind != PARALLEL:
            raise ValueError(f"{sym.name} is not a parallel symbol")
        facs = dict(self.factors)
        if facs.get(sym) == -1:
            raise DoubleShardError(
                f"dimension {self} already divided by {sym.name}")
        facs[sym] = facs.get(sym, 0) - 1
        return DimExpr.build(self.coeff, facs)

    def div_model(self, sym: Symbol) -> "DimExpr":
        facs = dict(self.factors)
        facs[sym] = facs.get(sym, 0) - 1
        return DimExpr.build(self.coeff, facs)

    def div_const(self, n) -> "DimExpr":
        return DimExpr.build(self.coeff / Fraction(n), dict(self.factors))

    def parallel_divisors(self) -> Tuple[Symbol, ...]:
        return tuple(s for s, e in self.factors if s.kind == PARALLEL)

    def model_symbols(self) -> Tuple[Symbol, ...]:
        return tuple(s for s, e in self.factors if s.kind == MODEL)

    def contains(self, sym: Symbol) -> bool:
        return any(s == sym for s, _ in self.factors)

    # -- evaluation --

    def evaluate(self, table: "SymbolTable", where: str = "") -> int:
        val = self.coeff
        for s, e in self.factors:
            b = table.get(s)
            if b is None:
                raise UnboundSymbolError(
                    f"symbol {s.name} unbound while evaluating {self}"
                    + (f" in {where}" if where else ""))
            val *= Fraction(b) ** e
        if val.denominator != 1 or val <= 0:
            raise NonIntegralDimError(
                f"dimension {self} evaluates to {val}"
                + (f" in {where}" if where else "")
                + "; expected a positive integer")
        return int(val)

    # -- textual form --

    def __str__(self):
        num_syms = []
        den_parts = []
        for s, e in self.factors:
            if e > 0:
                num_syms.append(s.name if e == 1 else f"{s.name}^{e}")
            else:
                for _ in range(-e):
                    den_parts.append(s.name)
        if num_syms:
            head = "*".join(num_syms)
            if self.coeff.numerator != 1:
                head = f"{self.coeff.numerator}{head}"  # juxtaposed: 4H
        else:
            head = str(self.coeff.numerator)
        if self.coeff.denominator != 1:
            den_parts.insert(0, str(self.coeff.denominator))
        return head + "".join("/" + d for d in den_parts)

    def __repr__(self):
        return f"DimExpr({self})"


_TOKEN = re.compile(r"\s*(\d+|[A-Za-z_][A-Za-z0-9_]*|\^|\*|/)")


def parse_dim(text: str, registry: "SymbolRegistry") -> DimExpr:
    """Parse the size part of a dimension (no parallel divisors expected here;
    they are legal and end up as exponent -1 parallel factors, but the template
    parser strips them first)."""
    pos = 0
    toks = []
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise TemplateSyntaxError(f"bad dimension {text!r} at offset {pos}")
        toks.append(m.group(1))
        pos = m.end()
    if not toks:
        raise TemplateSyntaxError("empty dimension")

    coeff = Fraction(1)
    facs: Dict[Symbol, int] = {}
    i = 0
    sign = 1  # +1 multiply, -1 divide

    def apply_ident(name, exp):
        sym = registry.lookup(name)
        facs[sym] = facs.get(sym, 0) + exp

    while i < len(toks):
        t = toks[i]
        if t == "*":
            sign = 1
            i += 1
            continue
        if t == "/":
            sign = -1
            i += 1
            continue
        if t.isdigit():
            coeff = coeff * Fraction(t) if sign > 0 else coeff / Fraction(t)
            sign = 1
            i += 1
            # juxtaposed symbol right after a number: "4H"
            if i < len(toks) and re.match(r"[A-Za-z_]", toks[i]):
                continue
            continue
        # identifier, maybe with ^exp
        exp = 1
        if i + 2 < len(toks) and toks[i + 1] == "^" and toks[i + 2].isdigit():
            exp = int(toks[i + 2])
            apply_ident(t, exp * sign)
            i += 3
        else:
            apply_ident(t, sign)
            i += 1
        sign = 1
    return DimExpr.build(coeff, facs)


class SymbolRegistry:
    """Name -> Symbol mapping used while parsing.

    Parallel symbols must be pre-declared; unknown names become model symbols
    on first use so template authors can introduce sizes freely.
    """

    def __init__(self, parallel: Iterable[str] = (), model: Iterable[str] = ()):
        self._syms: Dict[str, Symbol] = {}
        for n in parallel:
            self._syms[n] = Symbol(n, PARALLEL)
        for n in model:
            self._syms[n] = Symbol(n, MODEL)

    def declare_parallel(self, name: str) -> Symbol:
        s = self._syms.get(name)
        if s is not None:
            if s.kind != PARALLEL:
                raise TemplateSyntaxError(f"{name} already a model symbol")
            return s
        s = Symbol(name, PARALLEL)
        self._syms[name] = s
        return s

    def lookup(self, name: str) -> Symbol:
        s = self._syms.get(name)
        if s is None:
            s = Symbol(name, MODEL)
            self._syms[name] = s
        return s

    def get_parallel(self, name: str) -> Optional[Symbol]:
        s = self._syms.get(name)
        return s if s is not None and s.kind == PARALLEL else None

    def names(self):
        return sorted(self._syms)


class SymbolTable:
    """Bindings symbol -> positive integer, used at instantiation time."""

    def __init__(self, bindings: Optional[Dict[Symbol, int]] = None):
        self._b: Dict[Symbol, int] = dict(bindings or {})

    def bind(self, sym: Symbol, value: int) -> None:
        if int(value) <= 0:
            raise ValueError(f"{sym.name} bound to non-positive {value}")
        self._b[sym] = int(value)

    def get(self, sym: Symbol) -> Optional[int]:
        return self._b.get(sym)

    def copy(self) -> "SymbolTable":
        return SymbolTable(self._b)

    def as_dict(self) -> Dict[str, int]:
        return {s.name: v for s, v in sorted(self._b.items())}


# free-function aliases used throughout the package

def dim_mul(a: DimExpr, b: DimExpr) -> DimExpr:
    return a.mul(b)


def dim_div(a: DimExpr, p: Symbol) -> DimExpr:
    return a.div_parallel(p)


def eval_dim(d: DimExpr, table: SymbolTable) -> int:
    return d.evaluate(table)
