"""Labeled object pools and multiset-pair samplers.

Objects carry an integer id, a label in ``1..k`` and a feature vector. Pair
targets are always computed exactly from the labels.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import FeatureBag
from .multiset import ContainmentRelation, Multiset, relation_from_sizes
from .transform import UniverseTransformation, ground_truth_pair


@dataclass(frozen=True)
class SyntheticUniverseSpec:
    k: int = 5
    d: int = 16
    prototype_scale: float = 4.0
    noise_sigma: float = 1.0
    n_train: int = 5000
    n_eval: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.k < 2:
            raise ValueError(f"k must be >= 2, got {self.k}")
        if self.d < 2:
            raise ValueError(f"d must be >= 2, got {self.d}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.n_train < 1 or self.n_eval < 1:
            raise ValueError("object pools must be non-empty")


@dataclass(frozen=True)
class ObjectPool:
    ids: np.ndarray
    labels: np.ndarray
    features: np.ndarray
    k: int
    _index: dict = field(init=False, repr=False, compare=False)
    _by_label: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not (len(self.ids) == len(self.labels) == len(self.features)):
            raise ValueError("ids, labels and features must have the same length")
        if len(self.ids) == 0:
            raise ValueError("empty pool")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("duplicate object ids")
        object.__setattr__(self, "_index", {int(x): i for i, x in enumerate(self.ids)})
        object.__setattr__(
            self, "_by_label", {y: np.flatnonzero(self.labels == y) for y in range(1, self.k + 1)}
        )

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def transformation(self) -> UniverseTransformation:
        return UniverseTransformation(dict(zip(self.ids.tolist(), self.labels.tolist())), self.k)

    def rows_with_label(self, label: int) -> np.ndarray:
        return self._by_label[label]

    def bag(self, m: Multiset) -> FeatureBag:
        rows = np.array([self._index[x] for x in m], dtype=np.int64)
        counts = np.array([m[x] for x in m])
        return FeatureBag(self.features[rows], counts, self.ids[rows])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "label"] + [f"f{i + 1}" for i in range(self.dim)])
            for x, y, f in zip(self.ids, self.labels, self.features):
                w.writerow([int(x), int(y)] + [repr(float(v)) for v in f])

    @classmethod
    def from_csv(cls, path, k: int | None = None) -> "ObjectPool":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        labels = data[:, 1].astype(np.int64)
        return cls(data[:, 0].astype(np.int64), labels, data[:, 2:], k or int(labels.max()))


def _balanced_labels(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % k + 1)


def gen_universe(spec: SyntheticUniverseSpec) -> tuple[ObjectPool, ObjectPool]:
    """Gaussian blobs around ``k`` random unit prototypes; disjoint train/eval pools."""
    rng = np.random.default_rng(spec.seed)
    protos = rng.standard_normal((spec.k, spec.d))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)

    def pool(n, first_id):
        labels = _balanced_labels(n, spec.k, rng)
        noise = rng.standard_normal((n, spec.d)) * spec.noise_sigma
        feats = protos[labels - 1] * spec.prototype_scale + noise
        return ObjectPool(np.arange(first_id, first_id + n), labels, feats, spec.k)

    train = pool(spec.n_train, 0)
    return train, pool(spec.n_eval, spec.n_train)


# -- samplers ------------------------------------------------------------------

UNIFORM = "uniform"
BALANCED = "balanced"


@dataclass(frozen=True)
class SamplerConfig:
    size_min: int = 2
    size_max: int = 5
    mode: str = UNIFORM
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.size_min <= self.size_max:
            raise ValueError(f"need 2 <= size_min <= size_max, got [{self.size_min}, {self.size_max}]")
        if self.mode not in (UNIFORM, BALANCED):
            raise ValueError(f"unknown sampler mode {self.mode!r}")


@dataclass(frozen=True)
class PairSample:
    a: FeatureBag
    b: FeatureBag
    a_ids: Multiset
    b_ids: Multiset
    target_symdiff: float
    target_intersection: float
    relation: ContainmentRelation

    @property
    def size_a(self) -> float:
        return self.a_ids.cardinality()

    @property
    def size_b(self) -> float:
        return self.b_ids.cardinality()


class SamplerError(RuntimeError):
    pass


def sample_multiset(pool: ObjectPool, cfg: SamplerConfig, rng: np.random.Generator) -> Multiset:
    size = int(rng.integers(cfg.size_min, cfg.size_max + 1))
    rows = rng.integers(0, len(pool), size=size)
    return Multiset.from_elements(pool.ids[rows].tolist())


def make_pair(pool: ObjectPool, t: UniverseTransformation, a: Multiset, b: Multiset) -> PairSample:
    truth = ground_truth_pair(t, a, b)
    return PairSample(pool.bag(a), pool.bag(b), a, b, truth.symdiff, truth.intersection, truth.relation)


def sample_pair(pool: ObjectPool, cfg: SamplerConfig, t: UniverseTransformation, rng: np.random.Generator) -> PairSample:
    a = sample_multiset(pool, cfg, rng)
    b = sample_multiset(pool, cfg, rng)
    return make_pair(pool, t, a, b)


def _objects_for_labels(pool: ObjectPool, labels, rng: np.random.Generator) -> Multiset:
    ids = []
    for y in labels:
        rows = pool.rows_with_label(int(y))
        if rows.size == 0:
            raise SamplerError(f"no object with label {y} in pool")
        ids.append(int(pool.ids[rows[rng.integers(rows.size)]]))
    return Multiset.from_elements(ids)


def sample_pair_balanced(
    pool: ObjectPool,
    cfg: SamplerConfig,
    t: UniverseTransformation,
    rng: np.random.Generator,
    max_attempts: int = 1000,
) -> PairSample:
    """Draw a pair whose label-level relation is uniform over the four classes.

    Equal pairs relabel every object of ``B`` with a fresh object of the same
    label. Subset pairs keep a random strict sub-multiset of ``B``'s labels
    (at least ``size_min`` of them) and realize it with fresh objects.
    Incomparable pairs come from rejection on uniform draws.
    """
    if cfg.size_min == cfg.size_max:
        raise SamplerError("balanced sampling needs size_max > size_min (strict containment)")
    kind = list(ContainmentRelation)[int(rng.integers(4))]

    def labels_of(m: Multiset) -> list[int]:
        out = []
        for x, c in m.items():
            out.extend([t(x)] * int(c))
        return out

    if kind is ContainmentRelation.EQUAL:
        b = sample_multiset(pool, cfg, rng)
        a = _objects_for_labels(pool, rng.permutation(labels_of(b)), rng)
        return make_pair(pool, t, a, b)

    if kind in (ContainmentRelation.PROPER_SUBSET, ContainmentRelation.PROPER_SUPERSET):
        big_size = int(rng.integers(cfg.size_min + 1, cfg.size_max + 1))
        rows = rng.integers(0, len(pool), size=big_size)
        big = Multiset.from_elements(pool.ids[rows].tolist())
        small_size = int(rng.integers(cfg.size_min, big_size))
        kept = rng.permutation(labels_of(big))[:small_size]
        small = _objects_for_labels(pool, kept, rng)
        if kind is ContainmentRelation.PROPER_SUBSET:
            return make_pair(pool, t, small, big)
        return make_pair(pool, t, big, small)

    for _ in range(max_attempts):
        a = sample_multiset(pool, cfg, rng)
        b = sample_multiset(pool, cfg, rng)
        truth = ground_truth_pair(t, a, b)
        if truth.relation is ContainmentRelation.INCOMPARABLE:
            return PairSample(pool.bag(a), pool.bag(b), a, b, truth.symdiff, truth.intersection, truth.relation)
    raise SamplerError(f"no incomparable pair after {max_attempts} attempts")


class PairSampler:
    """Seeded stream of pairs from one pool; owns its PRNG."""

    def __init__(self, pool: ObjectPool, cfg: SamplerConfig, rng: np.random.Generator | None = None):
        self.pool = pool
        self.cfg = cfg
        self.t = pool.transformation()
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)

    def __iter__(self):
        return self

    def __next__(self) -> PairSample:
        if self.cfg.mode == BALANCED:
            return sample_pair_balanced(self.pool, self.cfg, self.t, self.rng)
        return sample_pair(self.pool, self.cfg, self.t, self.rng)


def check_pair(pair: PairSample, tau: float = 1.0) -> None:
    """Raise if the stored targets break the size identities."""
    a, b = pair.size_a, pair.size_b
    if pair.target_symdiff != a + b - 2 * pair.target_intersection:
        raise AssertionError("targets violate |A^B| = |A| + |B| - 2|AnB|")
    if relation_from_sizes(a, b, pair.target_symdiff, tau) is not pair.relation:
        raise AssertionError("relation inconsistent with exact sizes")


# -- IDX (MNIST) ---------------------------------------------------------------

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: {message} (offset {offset})")
        self.path = path
        self.offset = offset


def _read_idx(path, magic: int, ndims: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    header = 4 + 4 * ndims
    if len(buf) < header:
        raise IdxFormatError(path, len(buf), f"truncated header, need {header} bytes")
    (got,) = struct.unpack(">I", buf[:4])
    if got != magic:
        raise IdxFormatError(path, 0, f"bad magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndims}I", buf[4:header])
    need = int(np.prod(dims, dtype=np.int64))
    if len(buf) - header < need:
        raise IdxFormatError(path, len(buf), f"truncated payload, need {need} bytes after header")
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=header).reshape(dims)


def read_idx(images_path, labels_path, first_id: int = 0) -> ObjectPool:
    """Load an IDX image/label file pair; pixels scale to [0, 1], digit ``c`` becomes label ``c + 1``."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(labels_path, 4, f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels")
    feats = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    y = labels.astype(np.int64) + 1
    n = len(y)
    return ObjectPool(np.arange(first_id, first_id + n), y, feats, int(max(y.max(), 10)))


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]) + labels.tobytes())
