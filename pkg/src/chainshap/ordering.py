"""Partial causal orderings (chain graphs) and their bracket DSL.

An ordering is written as a nested list, earliest causes first::

    [NW, [SC, Emp, Uemp], [Inc, Lab], [Uins, Com, Pov, GI], [Den, MC, Tran]]

A bare symbol is a singleton component. A bracketed group is a component
whose members have no causal order among themselves; a trailing ``!`` on a
group marks its within-group dependence as confounded.
"""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

METRICS: tuple[str, ...] = (
    "Den", "NW", "Inc", "Pov", "Uemp", "Uins", "Emp",
    "Lab", "Tran", "MC", "SC", "GI", "Com",
)

BUILTIN_TEXT = {
    "CO1": "[NW, [SC, Emp, Uemp], [Inc, Lab], [Uins, Com, Pov, GI], [Den, MC, Tran]]",
    "CO2": "[[Emp, Uemp], [Inc, Lab], SC, NW, [Uins, Com, Pov, GI], [Den, MC, Tran]]",
    "CO3": "[SC, NW, [Emp, Uemp, Inc, Lab], [Uins, Com, Pov, GI], [Den, MC, Tran]]",
}


class OrderingError(ValueError):
    """Base class for ordering DSL errors."""


class OrderingSyntaxError(OrderingError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


class UnknownSymbolError(OrderingError):
    def __init__(self, symbol: str, position: int):
        super().__init__(f"unknown symbol {symbol!r} at position {position}")
        self.symbol = symbol
        self.position = position


class DuplicateSymbolError(OrderingError):
    def __init__(self, symbol: str, position: int):
        super().__init__(f"duplicate symbol {symbol!r} at position {position}")
        self.symbol = symbol
        self.position = position


class IncompleteOrderingError(OrderingError):
    def __init__(self, missing: Sequence[str]):
        super().__init__("ordering omits features: " + ", ".join(missing))
        self.missing = list(missing)


@dataclass(frozen=True)
class ChainComponent:
    features: tuple[str, ...]
    confounded: bool = False

    def __post_init__(self):
        if not self.features:
            raise OrderingError("chain component must be nonempty")
        if len(self.features) == 1 and self.confounded:
            # confounding inside a one-node component has no effect on sampling
            object.__setattr__(self, "confounded", False)


@dataclass(frozen=True)
class CausalOrdering:
    components: tuple[ChainComponent, ...]
    feature_universe: tuple[str, ...]

    def __post_init__(self):
        if not self.components:
            raise OrderingError("ordering needs at least one component")
        seen: list[str] = []
        for comp in self.components:
            for f in comp.features:
                if f not in self.feature_universe:
                    raise UnknownSymbolError(f, -1)
                if f in seen:
                    raise DuplicateSymbolError(f, -1)
                seen.append(f)
        missing = [f for f in self.feature_universe if f not in seen]
        if missing:
            raise IncompleteOrderingError(missing)

    @classmethod
    def single(cls, universe: Sequence[str], confounded: bool) -> "CausalOrdering":
        """One component holding every feature (marginal or conditional SHAP)."""
        universe = tuple(universe)
        return cls((ChainComponent(universe, confounded),), universe)

    def index_groups(self) -> list[tuple[np.ndarray, bool]]:
        """Components as column-index arrays into ``feature_universe``."""
        pos = {f: i for i, f in enumerate(self.feature_universe)}
        return [
            (np.array([pos[f] for f in c.features], dtype=int), c.confounded)
            for c in self.components
        ]

    def to_text(self) -> str:
        return format_ordering(self)

    def __str__(self) -> str:
        return format_ordering(self)


def format_ordering(ordering: CausalOrdering) -> str:
    parts = []
    for comp in ordering.components:
        if len(comp.features) == 1:
            parts.append(comp.features[0])
        else:
            parts.append("[" + ", ".join(comp.features) + "]" + ("!" if comp.confounded else ""))
    return "[" + ", ".join(parts) + "]"


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch.isspace():
            i += 1
        elif ch in "[],!":
            tokens.append((ch, ch, i))
            i += 1
        elif ch.isalnum() or ch in "_.-":
            j = i
            while j < len(text) and (text[j].isalnum() or text[j] in "_.-"):
                j += 1
            tokens.append(("sym", text[i:j], i))
            i = j
        else:
            raise OrderingSyntaxError(f"unexpected character {ch!r}", i)
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str, universe: Sequence[str]):
        self.tokens = _tokenize(text)
        self.i = 0
        self.lookup = {u.lower(): u for u in universe}
        self.seen: set[str] = set()

    def peek(self):
        return self.tokens[self.i]

    def take(self, kind: str):
        tok = self.tokens[self.i]
        if tok[0] != kind:
            what = "end of input" if tok[0] == "end" else repr(tok[1])
            raise OrderingSyntaxError(f"expected {kind!r}, found {what}", tok[2])
        self.i += 1
        return tok

    def symbol(self) -> str:
        _, raw, pos = self.take("sym")
        name = self.lookup.get(raw.lower())
        if name is None:
            raise UnknownSymbolError(raw, pos)
        if name in self.seen:
            raise DuplicateSymbolError(name, pos)
        self.seen.add(name)
        return name

    def group(self) -> ChainComponent:
        self.take("[")
        members = [self.symbol()]
        while self.peek()[0] == ",":
            self.take(",")
            members.append(self.symbol())
        self.take("]")
        confounded = False
        if self.peek()[0] == "!":
            self.take("!")
            confounded = True
        return ChainComponent(tuple(members), confounded)

    def ordering(self) -> list[ChainComponent]:
        self.take("[")
        comps = []
        while True:
            kind, _, pos = self.peek()
            if kind == "sym":
                comps.append(ChainComponent((self.symbol(),)))
                if self.peek()[0] == "!":
                    raise OrderingSyntaxError("'!' applies only to bracketed groups", self.peek()[2])
            elif kind == "[":
                comps.append(self.group())
            else:
                raise OrderingSyntaxError("expected a symbol or '['", pos)
            if self.peek()[0] == ",":
                self.take(",")
                continue
            break
        self.take("]")
        self.take("end")
        return comps


def parse_ordering(text: str, universe: Sequence[str] = METRICS) -> CausalOrdering:
    """Parse the bracket DSL against ``universe``.

    Symbols are matched case-insensitively and stored under the universe's
    spelling. Raises a subclass of :class:`OrderingError` on any problem.
    """
    universe = tuple(universe)
    parser = _Parser(text, universe)
    comps = parser.ordering()
    missing = [u for u in universe if u not in parser.seen]
    if missing:
        raise IncompleteOrderingError(missing)
    return CausalOrdering(tuple(comps), universe)


def builtin_orderings() -> dict[str, CausalOrdering]:
    return {label: parse_ordering(text, METRICS) for label, text in BUILTIN_TEXT.items()}


def resolve_ordering(spec: str, universe: Sequence[str] = METRICS) -> CausalOrdering:
    """Accept a built-in label (``CO1``, ``co#2`` ...) or a DSL string."""
    key = spec.strip().upper().replace("#", "")
    if key in BUILTIN_TEXT:
        return parse_ordering(BUILTIN_TEXT[key], universe)
    return parse_ordering(spec, universe)


def shuffle_components(ordering: CausalOrdering, n_perms: int, seed: int) -> list[CausalOrdering]:
    """Random rearrangements of the component order.

    Distinct permutations are drawn without replacement whenever
    ``n_perms <= K!``; otherwise with replacement and a warning.
    """
    if n_perms < 1:
        raise ValueError("n_perms must be >= 1")
    comps = ordering.components
    k = len(comps)
    rng = np.random.default_rng(seed)
    if k == 1:
        warnings.warn("single-component ordering: every shuffle is identical", stacklevel=2)
        return [ordering] * n_perms

    n_possible = math.factorial(k)
    if n_perms > n_possible:
        warnings.warn(
            f"{n_perms} shuffles requested but only {n_possible} orderings exist; sampling with replacement",
            stacklevel=2,
        )
        perms = [tuple(rng.permutation(k)) for _ in range(n_perms)]
    elif k <= 8:
        everything = list(itertools.permutations(range(k)))
        picks = rng.choice(len(everything), size=n_perms, replace=False)
        perms = [everything[p] for p in picks]
    else:
        chosen: dict[tuple, None] = {}
        while len(chosen) < n_perms:
            chosen.setdefault(tuple(int(v) for v in rng.permutation(k)), None)
        perms = list(chosen)

    return [
        CausalOrdering(tuple(comps[j] for j in perm), ordering.feature_universe)
        for perm in perms
    ]
