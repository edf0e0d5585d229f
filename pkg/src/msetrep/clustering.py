"""Cluster recovery from symmetric-difference sizes of label multisets.

``build_certificate`` uses the true partition to lay out ``n - 1`` queries
whose answers pin that partition down; ``verify_certificate`` replays them.
``recover_adaptive`` is a separate baseline that needs no prior knowledge.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .multiset import Multiset

SPLIT = "split"
SINGLETON = "singleton"

Oracle = Callable[[Sequence[int], Sequence[int]], float]


@dataclass(frozen=True)
class ClusterInstance:
    """Objects ``0..n-1`` with hidden labels in ``1..k``."""

    labels: tuple[int, ...]
    k: int

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(int(y) for y in self.labels))
        if not self.labels:
            raise ValueError("instance needs at least one object")
        if set(self.labels) != set(range(1, self.k + 1)):
            raise ValueError(f"labels must cover exactly 1..{self.k}")

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def objects(self) -> list[int]:
        return list(range(self.n))

    def true_clusters(self) -> list[tuple[int, ...]]:
        return canonical_partition(
            [tuple(i for i, y in enumerate(self.labels) if y == c) for c in range(1, self.k + 1)]
        )

    def to_json(self, include_labels: bool = True) -> str:
        d = {"objects": self.objects, "k": self.k}
        if include_labels:
            d["labels"] = list(self.labels)
        return json.dumps(d)

    @classmethod
    def from_json(cls, text: str) -> "ClusterInstance":
        d = json.loads(text)
        if "labels" not in d:
            raise ValueError("instance JSON has no hidden labels")
        return cls(tuple(d["labels"]), int(d["k"]))


def random_instance(rng: np.random.Generator, n: int, k: int) -> ClusterInstance:
    """Uniform labels, with the first ``k`` positions forced so every cluster is non-empty."""
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    labels = np.concatenate([np.arange(1, k + 1), rng.integers(1, k + 1, size=n - k)])
    return ClusterInstance(tuple(rng.permutation(labels).tolist()), k)


def canonical_partition(clusters: Iterable[Iterable[int]]) -> list[tuple[int, ...]]:
    """Sorted members, clusters ordered by smallest member; empties dropped."""
    out = [tuple(sorted(int(x) for x in c)) for c in clusters]
    return sorted((c for c in out if c), key=lambda c: c[0])


def same_partition(p: Iterable[Iterable[int]], q: Iterable[Iterable[int]]) -> bool:
    return canonical_partition(p) == canonical_partition(q)


def delta_oracle(inst: ClusterInstance, a: Sequence[int], b: Sequence[int]) -> int:
    """``|M(A) ^ M(B)|`` where ``M`` collects the hidden labels of a set of objects."""
    ma = Multiset.from_elements(inst.labels[i] for i in a)
    mb = Multiset.from_elements(inst.labels[i] for i in b)
    return int(round((ma ^ mb).cardinality()))


class CountingOracle:
    """Stateful wrapper that counts how many queries were asked."""

    def __init__(self, inst: ClusterInstance):
        self.inst = inst
        self.queries = 0

    def __call__(self, a: Sequence[int], b: Sequence[int]) -> int:
        self.queries += 1
        return delta_oracle(self.inst, a, b)


@dataclass(frozen=True)
class Query:
    left: tuple[int, ...]
    right: tuple[int, ...]
    expected: int
    kind: str

    def to_dict(self) -> dict:
        return {"left": list(self.left), "right": list(self.right), "expected": self.expected, "kind": self.kind}


@dataclass(frozen=True)
class Certificate:
    clusters: tuple[tuple[int, ...], ...]
    queries: tuple[Query, ...] = field(default=())

    @property
    def n(self) -> int:
        return sum(len(c) for c in self.clusters)

    @property
    def k(self) -> int:
        return len(self.clusters)

    def count(self, kind: str) -> int:
        return sum(q.kind == kind for q in self.queries)

    def to_json(self) -> str:
        return json.dumps({"clusters": [list(c) for c in self.clusters], "queries": [q.to_dict() for q in self.queries]})

    @classmethod
    def from_json(cls, text: str) -> "Certificate":
        d = json.loads(text)
        queries = tuple(Query(tuple(q["left"]), tuple(q["right"]), int(q["expected"]), q["kind"]) for q in d["queries"])
        return cls(tuple(tuple(c) for c in d["clusters"]), queries)


def _split_queries(groups: list[tuple[int, ...]], out: list[Query]) -> None:
    # Pre-order over a balanced tree on clusters: k leaves give k-1 internal nodes.
    if len(groups) < 2:
        return
    half = math.ceil(len(groups) / 2)
    left, right = groups[:half], groups[half:]
    lo = tuple(x for g in left for x in g)
    hi = tuple(x for g in right for x in g)
    out.append(Query(lo, hi, len(lo) + len(hi), SPLIT))
    _split_queries(left, out)
    _split_queries(right, out)


def build_certificate(inst: ClusterInstance, clusters: Iterable[Iterable[int]]) -> Certificate:
    """Split queries (disjoint label support expected) then consecutive singleton queries (expected 0).

    Uses only the claimed ``clusters``; the instance is consulted to check the
    claim covers its objects, never for labels.
    """
    groups = canonical_partition(clusters)
    members = sorted(x for g in groups for x in g)
    if members != inst.objects:
        raise ValueError("claimed clustering must partition the instance's objects exactly once")
    queries: list[Query] = []
    _split_queries(groups, queries)
    for g in groups:
        for x, y in zip(g, g[1:]):
            queries.append(Query((x,), (y,), 0, SINGLETON))
    return Certificate(tuple(groups), tuple(queries))


def verify_certificate(cert: Certificate, oracle: Oracle) -> bool:
    """True iff every answer matches; that holds exactly when the claimed clusters are the true ones."""
    return all(oracle(q.left, q.right) == q.expected for q in cert.queries)


@dataclass
class Recovery:
    clusters: list[tuple[int, ...]]
    queries: int


def recover_adaptive(objects: Sequence[int], oracle: Oracle) -> Recovery:
    """Greedy grouping against one representative per discovered cluster; at most ``n * k`` queries."""
    reps: list[int] = []
    groups: list[list[int]] = []
    asked = 0
    for x in objects:
        for rep, g in zip(reps, groups):
            asked += 1
            if oracle((x,), (rep,)) == 0:
                g.append(x)
                break
        else:
            reps.append(x)
            groups.append([x])
    return Recovery(canonical_partition(groups), asked)


# -- perturbations used to check that verification rejects wrong claims --------


def merge_two(clusters: list[tuple[int, ...]], rng: np.random.Generator) -> list[tuple[int, ...]]:
    i, j = sorted(rng.choice(len(clusters), size=2, replace=False).tolist())
    rest = [c for n, c in enumerate(clusters) if n not in (i, j)]
    return canonical_partition(rest + [clusters[i] + clusters[j]])


def split_one(clusters: list[tuple[int, ...]], rng: np.random.Generator) -> list[tuple[int, ...]]:
    big = [n for n, c in enumerate(clusters) if len(c) >= 2]
    i = big[int(rng.integers(len(big)))]
    members = list(rng.permutation(clusters[i]))
    cut = int(rng.integers(1, len(members)))
    rest = [c for n, c in enumerate(clusters) if n != i]
    return canonical_partition(rest + [members[:cut], members[cut:]])


def swap_one(clusters: list[tuple[int, ...]], rng: np.random.Generator) -> list[tuple[int, ...]]:
    """Move one object from a cluster of size >= 2 into a different cluster."""
    big = [n for n, c in enumerate(clusters) if len(c) >= 2]
    i = big[int(rng.integers(len(big)))]
    j = int(rng.choice([n for n in range(len(clusters)) if n != i]))
    x = clusters[i][int(rng.integers(len(clusters[i])))]
    out = [list(c) for c in clusters]
    out[i].remove(x)
    out[j].append(x)
    return canonical_partition(out)
