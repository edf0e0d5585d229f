"""Exact multiset algebra over a finite universe with the counting measure.

Multiplicities are non-negative reals; zero entries are never stored, so two
multisets are equal exactly when their stored maps are equal.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple

import numpy as np

ATOL = 1e-9
DEFAULT_TAU = 1.0


class ContainmentRelation(enum.Enum):
    EQUAL = "equal"
    PROPER_SUBSET = "proper_subset"
    PROPER_SUPERSET = "proper_superset"
    INCOMPARABLE = "incomparable"

    @property
    def index(self) -> int:
        return _RELATION_ORDER.index(self)


_RELATION_ORDER = list(ContainmentRelation)


@dataclass(frozen=True)
class Multiset:
    """A finite-support membership function ``element id -> multiplicity``.

    Construct from a mapping or from an iterable of element ids (each
    occurrence counts once)::

        Multiset({1: 3, 2: 2})
        Multiset.from_elements([1, 1, 1, 2, 2])
    """

    entries: Mapping[int, float] = field(default_factory=dict)
    integer_valued: bool = field(init=False)

    def __post_init__(self):
        clean = {}
        for key, value in self.entries.items():
            value = float(value)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"multiplicity of {key} must be finite and >= 0, got {value}")
            if value > 0:
                clean[int(key)] = value
        object.__setattr__(self, "entries", dict(sorted(clean.items())))
        object.__setattr__(self, "integer_valued", all(v.is_integer() for v in clean.values()))

    @classmethod
    def from_elements(cls, elements: Iterable[int]) -> "Multiset":
        counts: dict[int, float] = {}
        for x in elements:
            counts[x] = counts.get(x, 0.0) + 1.0
        return cls(counts)

    def __getitem__(self, key: int) -> float:
        return self.entries.get(key, 0.0)

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __hash__(self) -> int:
        return hash(tuple(self.entries.items()))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Multiset):
            return NotImplemented
        return self.entries == other.entries

    def __repr__(self) -> str:
        body = ", ".join(f"{k}: {_fmt(v)}" for k, v in self.entries.items())
        return f"Multiset({{{body}}})"

    @property
    def support(self) -> frozenset[int]:
        return frozenset(self.entries)

    def items(self):
        return self.entries.items()

    def cardinality(self) -> float:
        return cardinality(self)

    def __and__(self, other: "Multiset") -> "Multiset":
        return intersect(self, other)

    def __or__(self, other: "Multiset") -> "Multiset":
        return union(self, other)

    def __add__(self, other: "Multiset") -> "Multiset":
        return msum(self, other)

    def __sub__(self, other: "Multiset") -> "Multiset":
        return difference(self, other)

    def __xor__(self, other: "Multiset") -> "Multiset":
        return sym_difference(self, other)

    def to_text(self) -> str:
        return "".join(f"{k} {_fmt(v)}\n" for k, v in self.entries.items())

    @classmethod
    def from_text(cls, text: str) -> "Multiset":
        entries: dict[int, float] = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"line {lineno}: expected '<element-id> <multiplicity>', got {line!r}")
            key = int(parts[0])
            if key in entries:
                raise ValueError(f"line {lineno}: duplicate element {key}")
            entries[key] = float(parts[1])
        return cls(entries)


def _fmt(value: float) -> str:
    return str(int(value)) if value.is_integer() else repr(value)


def _combine(a: Multiset, b: Multiset, fn) -> Multiset:
    keys = a.entries.keys() | b.entries.keys()
    return Multiset({x: fn(a[x], b[x]) for x in keys})


def intersect(a: Multiset, b: Multiset) -> Multiset:
    return _combine(a, b, min)


def union(a: Multiset, b: Multiset) -> Multiset:
    return _combine(a, b, max)


def msum(a: Multiset, b: Multiset) -> Multiset:
    return _combine(a, b, lambda u, v: u + v)


def difference(a: Multiset, b: Multiset) -> Multiset:
    return _combine(a, b, lambda u, v: max(u - v, 0.0))


def sym_difference(a: Multiset, b: Multiset) -> Multiset:
    return _combine(a, b, lambda u, v: abs(u - v))


def cardinality(a: Multiset) -> float:
    return math.fsum(a.entries.values())


def is_subset(a: Multiset, b: Multiset, atol: float = ATOL) -> bool:
    return all(v <= b[x] + atol for x, v in a.entries.items())


def containment_relation(a: Multiset, b: Multiset, atol: float = ATOL) -> ContainmentRelation:
    sub = is_subset(a, b, atol)
    sup = is_subset(b, a, atol)
    if sub and sup:
        return ContainmentRelation.EQUAL
    if sub:
        return ContainmentRelation.PROPER_SUBSET
    if sup:
        return ContainmentRelation.PROPER_SUPERSET
    return ContainmentRelation.INCOMPARABLE


@dataclass(frozen=True, eq=False)
class LabelVector:
    """Dense multiplicity vector of a multiset over labels ``1..k`` (component ``i`` is label ``i+1``)."""

    components: np.ndarray

    def __post_init__(self):
        comp = np.array(self.components, dtype=np.float64, copy=True).reshape(-1)
        if not np.all(np.isfinite(comp)) or np.any(comp < 0):
            raise ValueError("label vector components must be finite and non-negative")
        comp.setflags(write=False)
        object.__setattr__(self, "components", comp)

    @property
    def dim(self) -> int:
        return self.components.shape[0]

    def cardinality(self) -> float:
        return math.fsum(self.components)

    def to_multiset(self) -> Multiset:
        return Multiset({i + 1: v for i, v in enumerate(self.components)})

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabelVector):
            return NotImplemented
        return np.array_equal(self.components, other.components)

    def __repr__(self) -> str:
        return f"LabelVector({self.components.tolist()})"


def natural_representation(s: Multiset, k: int) -> LabelVector:
    """Map a multiset over labels ``1..k`` to its dense multiplicity vector."""
    vec = np.zeros(k)
    for label, m in s.items():
        if not 1 <= label <= k:
            raise ValueError(f"label {label} outside 1..{k}")
        vec[label - 1] = m
    return LabelVector(vec)


def _as_components(r) -> np.ndarray:
    return r.components if isinstance(r, LabelVector) else np.asarray(r, dtype=np.float64)


def _pair(r, s) -> tuple[np.ndarray, np.ndarray]:
    u, v = _as_components(r), _as_components(s)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    return u, v


def symdiff_size_from_reps(r, s) -> float:
    u, v = _pair(r, s)
    return math.fsum(np.abs(u - v))


def intersection_size_from_reps(r, s) -> float:
    u, v = _pair(r, s)
    return math.fsum(np.minimum(u, v))


class Clamped(NamedTuple):
    value: float
    clamped: bool


def intersection_from_symdiff(a: float, b: float, d: float) -> Clamped:
    """Recover ``|A n B|`` from ``|A|``, ``|B|`` and ``|A ^ B|``.

    The raw value ``(a + b - d) / 2`` is clamped into ``[0, min(a, b)]``; the
    flag reports whether clamping was needed (inconsistent inputs).
    """
    raw = (a + b - d) / 2.0
    value = min(max(raw, 0.0), min(a, b))
    return Clamped(value, value != raw)


def symdiff_from_intersection(a: float, b: float, i: float) -> float:
    return a + b - 2.0 * i


def relation_from_sizes(a: float, b: float, d_hat: float, tau: float = DEFAULT_TAU) -> ContainmentRelation:
    """Decide containment from the two cardinalities and a (predicted) symmetric-difference size.

    ``A <= B`` holds iff ``|A ^ B| <= |B| - |A|``; ``tau`` is the slack allowed
    on that inequality when ``d_hat`` is an estimate. The cardinalities are
    exact, so equality additionally needs ``a == b`` (up to ``ATOL``).
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if abs(a - b) <= ATOL and d_hat <= tau:
        return ContainmentRelation.EQUAL
    if a < b and d_hat <= (b - a) + tau:
        return ContainmentRelation.PROPER_SUBSET
    if b < a and d_hat <= (a - b) + tau:
        return ContainmentRelation.PROPER_SUPERSET
    return ContainmentRelation.INCOMPARABLE
