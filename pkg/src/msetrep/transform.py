"""Maps from object multisets to label multisets.

Ground truth is always a hard labeling (``UniverseTransformation``); the soft
``ProbabilisticTransformation`` is what the learned model realizes, kept here
as a table so both can be checked against each other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, NamedTuple

import numpy as np

from .multiset import (
    ContainmentRelation,
    LabelVector,
    Multiset,
    containment_relation,
    intersection_size_from_reps,
    symdiff_size_from_reps,
)


class MissingElementError(KeyError):
    """An element of a multiset has no entry in the transformation table."""

    def __init__(self, element: int, what: str):
        super().__init__(element)
        self.element = element
        self.what = what

    def __str__(self) -> str:
        return f"element {self.element} has no {self.what}"


@dataclass(frozen=True)
class UniverseTransformation:
    """Hard labeling ``element id -> label in 1..k``."""

    label_of: Mapping[int, int]
    k: int

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        table = {int(x): int(y) for x, y in self.label_of.items()}
        bad = [(x, y) for x, y in table.items() if not 1 <= y <= self.k]
        if bad:
            x, y = bad[0]
            raise ValueError(f"label {y} of element {x} outside 1..{self.k}")
        object.__setattr__(self, "label_of", table)

    def __call__(self, element: int) -> int:
        try:
            return self.label_of[element]
        except KeyError:
            raise MissingElementError(element, "label") from None

    def to_text(self) -> str:
        return "".join(f"{x} {y}\n" for x, y in sorted(self.label_of.items()))

    @classmethod
    def from_text(cls, text: str, k: int | None = None) -> "UniverseTransformation":
        table = {}
        for line in text.splitlines():
            if line.strip():
                x, y = line.split()
                table[int(x)] = int(y)
        return cls(table, k if k is not None else max(table.values(), default=1))


@dataclass(frozen=True)
class ProbabilisticTransformation:
    """Soft labeling ``element id -> probability vector over 1..k_hat``."""

    dist_of: Mapping[int, np.ndarray]
    k_hat: int

    def __post_init__(self):
        table = {}
        for x, p in self.dist_of.items():
            p = np.array(p, dtype=np.float64).reshape(-1)
            if p.shape != (self.k_hat,):
                raise ValueError(f"distribution of {x} has length {p.size}, expected {self.k_hat}")
            if np.any(p < 0) or abs(math.fsum(p) - 1.0) > 1e-9:
                raise ValueError(f"distribution of {x} is not a probability vector")
            p.setflags(write=False)
            table[int(x)] = p
        object.__setattr__(self, "dist_of", table)

    @classmethod
    def from_hard(cls, t: UniverseTransformation) -> "ProbabilisticTransformation":
        eye = np.eye(t.k)
        return cls({x: eye[y - 1] for x, y in t.label_of.items()}, t.k)

    def __call__(self, element: int) -> np.ndarray:
        try:
            return self.dist_of[element]
        except KeyError:
            raise MissingElementError(element, "distribution") from None

    def to_text(self) -> str:
        return "".join(
            f"{x} " + " ".join(repr(float(v)) for v in p) + "\n" for x, p in sorted(self.dist_of.items())
        )

    @classmethod
    def from_text(cls, text: str) -> "ProbabilisticTransformation":
        table = {}
        for line in text.splitlines():
            if line.strip():
                head, *probs = line.split()
                table[int(head)] = np.array([float(v) for v in probs])
        if not table:
            raise ValueError("empty distribution table")
        return cls(table, len(next(iter(table.values()))))


def pushforward(t: UniverseTransformation, a: Multiset) -> LabelVector:
    vec = np.zeros(t.k)
    for x, m in a.items():
        vec[t(x) - 1] += m
    return LabelVector(vec)


def expectation_transform(ell: ProbabilisticTransformation, a: Multiset) -> LabelVector:
    vec = np.zeros(ell.k_hat)
    for x, m in a.items():
        vec += m * ell(x)
    return LabelVector(vec)


class GroundTruth(NamedTuple):
    symdiff: float
    intersection: float
    relation: ContainmentRelation


def ground_truth_pair(t: UniverseTransformation, a: Multiset, b: Multiset) -> GroundTruth:
    ra, rb = pushforward(t, a), pushforward(t, b)
    return GroundTruth(
        symdiff_size_from_reps(ra, rb),
        intersection_size_from_reps(ra, rb),
        containment_relation(ra.to_multiset(), rb.to_multiset()),
    )
