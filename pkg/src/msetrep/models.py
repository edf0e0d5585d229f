"""Permutation-invariant multiset models and their size-prediction losses.

Three representation variants share one object featurizer ``phi`` (an MLP):

* ``SIMPLEX``       sum over objects of ``softplus(phi(x)) / ||softplus(phi(x))||_1``
* ``UNRESTRICTED``  sum over objects of ``phi(x)``
* ``DEEPSETS``      ``rho1(sum over objects of phi(x))``

and three prediction heads: ``SYMDIFF_L1`` (``||rA - rB||_1``),
``INTERSECTION_MIN`` (``sum(min(rA, rB))``) and ``LEARNED_OP``
(``rho2(rA + rB)``).
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tape, Tensor


class Variant(str, enum.Enum):
    SIMPLEX = "simplex"
    UNRESTRICTED = "unrestricted"
    DEEPSETS = "deepsets"


class Head(str, enum.Enum):
    SYMDIFF_L1 = "symdiff-l1"
    INTERSECTION_MIN = "intersection-min"
    LEARNED_OP = "learned-op"


class Task(str, enum.Enum):
    SYMDIFF = "symdiff"
    INTERSECTION = "intersection"

    @property
    def matched_head(self) -> Head:
        return Head.SYMDIFF_L1 if self is Task.SYMDIFF else Head.INTERSECTION_MIN


@dataclass(frozen=True)
class ModelConfig:
    variant: Variant
    head: Head
    task: Task
    input_dim: int
    rep_dim: int
    hidden: tuple[int, ...] = (64, 64)
    rho1_widths: tuple[int, ...] = (100, 100)
    rho2_hidden: tuple[int, ...] = (100,)

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "head", Head(self.head))
        object.__setattr__(self, "task", Task(self.task))
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))
        object.__setattr__(self, "rho1_widths", tuple(int(w) for w in self.rho1_widths))
        object.__setattr__(self, "rho2_hidden", tuple(int(w) for w in self.rho2_hidden))
        if self.rep_dim < 1 or self.input_dim < 1:
            raise ValueError("input_dim and rep_dim must be >= 1")
        if self.variant is Variant.DEEPSETS and not self.rho1_widths:
            raise ValueError("DeepSets variant needs rho1 widths")
        if self.head is Head.LEARNED_OP and not self.rho2_hidden:
            raise ValueError("learned-op head needs rho2 widths")

    @classmethod
    def matched(cls, variant, task, input_dim: int, rep_dim: int, learned_op: bool = False, **widths):
        task = Task(task)
        head = Head.LEARNED_OP if learned_op else task.matched_head
        return cls(Variant(variant), head, task, input_dim, rep_dim, **widths)

    @property
    def set_dim(self) -> int:
        """Dimension of a multiset representation."""
        return self.rho1_widths[-1] if self.variant is Variant.DEEPSETS else self.rep_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(variant=self.variant.value, head=self.head.value, task=self.task.value)
        for key in ("hidden", "rho1_widths", "rho2_hidden"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _layer_shapes(cfg: ModelConfig) -> dict[str, list[tuple[int, int]]]:
    def chain(widths):
        return list(zip(widths[:-1], widths[1:]))

    shapes = {"phi": chain((cfg.input_dim, *cfg.hidden, cfg.rep_dim))}
    if cfg.variant is Variant.DEEPSETS:
        shapes["rho1"] = chain((cfg.rep_dim, *cfg.rho1_widths))
    if cfg.head is Head.LEARNED_OP:
        shapes["rho2"] = chain((cfg.set_dim, *cfg.rho2_hidden, 1))
    return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = {}
    for net, layers in _layer_shapes(cfg).items():
        for i, (fan_in, fan_out) in enumerate(layers):
            params[f"{net}.{i}.W"] = ad.uniform_init(rng, fan_in, (fan_in, fan_out))
            params[f"{net}.{i}.b"] = ad.uniform_init(rng, fan_in, (fan_out,))
    return params


@dataclass(frozen=True)
class FeatureBag:
    """A multiset of feature vectors: row ``i`` of ``features`` occurs ``counts[i]`` times."""

    features: np.ndarray
    counts: np.ndarray
    ids: np.ndarray | None = None

    @classmethod
    def from_items(cls, items: Iterable[tuple[Sequence[float], float]], dim: int | None = None) -> "FeatureBag":
        items = list(items)
        if not items:
            if dim is None:
                raise ValueError("empty bag needs an explicit feature dimension")
            return cls(np.zeros((0, dim)), np.zeros(0))
        feats = np.array([np.asarray(x, dtype=np.float64) for x, _ in items])
        return cls(feats, np.array([float(m) for _, m in items]))

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def size(self) -> float:
        return float(self.counts.sum())

    def canonical(self) -> tuple[np.ndarray, np.ndarray]:
        """Distinct rows in lexicographic order with merged multiplicities.

        Summing in this fixed order makes pooling independent of how the
        caller listed the elements, bit for bit.
        """
        n = self.features.shape[0]
        if n == 0:
            return self.features, self.counts
        order = np.lexsort(self.features.T[::-1])
        feats = self.features[order]
        counts = self.counts[order]
        starts = np.concatenate([[True], np.any(feats[1:] != feats[:-1], axis=1)])
        idx = np.flatnonzero(starts)
        merged = np.add.reduceat(counts, idx)
        keep = merged > 0
        return feats[idx][keep], merged[keep]


# -- forward pieces over tape tensors -------------------------------------------


def _layers(P: dict[str, Tensor], net: str) -> list[tuple[Tensor, Tensor]]:
    out = []
    i = 0
    while f"{net}.{i}.W" in P:
        out.append((P[f"{net}.{i}.W"], P[f"{net}.{i}.b"]))
        i += 1
    return out


def _phi(P, x: Tensor) -> Tensor:
    return ad.mlp(x, _layers(P, "phi"), ad.relu)


def _object_rows(cfg: ModelConfig, P, x: Tensor) -> Tensor:
    h = _phi(P, x)
    if cfg.variant is Variant.SIMPLEX:
        h = ad.normalize_l1(ad.softplus(h))
    return h


def _pool(cfg: ModelConfig, P, rows: Tensor, weights) -> Tensor:
    r = ad.sum_pool(rows, weights)
    if cfg.variant is Variant.DEEPSETS:
        r = ad.mlp(r, _layers(P, "rho1"), ad.tanh_act)
    return r


def _empty_rep(cfg: ModelConfig, P) -> Tensor:
    r = ad.constant(np.zeros(cfg.rep_dim))
    if cfg.variant is Variant.DEEPSETS:
        r = ad.mlp(r, _layers(P, "rho1"), ad.tanh_act)
    return r


def _head(cfg: ModelConfig, P, ra: Tensor, rb: Tensor) -> Tensor:
    if cfg.head is Head.SYMDIFF_L1:
        return ad.l1_distance(ra, rb)
    if cfg.head is Head.INTERSECTION_MIN:
        return ad.min_pool_sum(ra, rb)
    return ad.total(ad.mlp(ad.add(ra, rb), _layers(P, "rho2"), ad.tanh_act))


def _bag_rep(cfg: ModelConfig, P, bag: FeatureBag) -> Tensor:
    feats, counts = bag.canonical()
    if feats.shape[0] == 0:
        return _empty_rep(cfg, P)
    if feats.shape[1] != cfg.input_dim:
        raise ValueError(f"feature dim {feats.shape[1]} does not match config input_dim {cfg.input_dim}")
    return _pool(cfg, P, _object_rows(cfg, P, ad.constant(feats)), counts)


def _pair_prediction(cfg: ModelConfig, P, a: FeatureBag, b: FeatureBag) -> Tensor:
    fa, ca = a.canonical()
    fb, cb = b.canonical()
    if fa.shape[0] == 0 or fb.shape[0] == 0:
        return _head(cfg, P, _bag_rep(cfg, P, a), _bag_rep(cfg, P, b))
    feats = np.concatenate([fa, fb])
    if feats.shape[1] != cfg.input_dim:
        raise ValueError(f"feature dim {feats.shape[1]} does not match config input_dim {cfg.input_dim}")
    rows = _object_rows(cfg, P, ad.constant(feats))
    na = fa.shape[0]
    wa = np.concatenate([ca, np.zeros(fb.shape[0])])
    wb = np.concatenate([np.zeros(na), cb])
    return _head(cfg, P, _pool(cfg, P, rows, wa), _pool(cfg, P, rows, wb))


def _wrap(params: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in params.items()}


# -- public API ----------------------------------------------------------------


@dataclass(frozen=True)
class Model:
    config: ModelConfig
    store: ParameterStore

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0, **adam) -> "Model":
        rng = np.random.default_rng(seed)
        return cls(config, ParameterStore.from_arrays(init_params(config, rng), **adam))

    @property
    def params(self) -> dict[str, np.ndarray]:
        return self.store.params

    def with_store(self, store: ParameterStore) -> "Model":
        return replace(self, store=store)

    def save(self, path) -> None:
        path = Path(path)
        ad.save_store(self.store, path)
        sidecar = {
            "model": self.config.to_dict(),
            "adam": {"lr": self.store.lr, "beta1": self.store.beta1, "beta2": self.store.beta2, "eps": self.store.eps},
        }
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "Model":
        path = Path(path)
        sidecar = json.loads(path.with_suffix(".json").read_text())
        return cls(ModelConfig.from_dict(sidecar["model"]), ad.load_store(path, **sidecar.get("adam", {})))


def featurize(model: Model, x) -> np.ndarray:
    """Raw featurizer output ``phi(x)`` for one vector or a ``[n, d]`` batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.config.input_dim:
        raise ValueError(f"input dim {x.shape[-1]} does not match config input_dim {model.config.input_dim}")
    return _phi(_wrap(model.params), ad.constant(x)).data


def embed_objects(model: Model, x) -> np.ndarray:
    """Per-object rows that get pooled (simplex points for the SIMPLEX variant)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return _object_rows(model.config, _wrap(model.params), ad.constant(x)).data


def represent(model: Model, bag: FeatureBag) -> np.ndarray:
    return _bag_rep(model.config, _wrap(model.params), bag).data


def predict(model: Model, rep_a: np.ndarray, rep_b: np.ndarray) -> float:
    P = _wrap(model.params)
    return float(_head(model.config, P, ad.constant(rep_a), ad.constant(rep_b)).data.reshape(()))


def predict_pair(model: Model, a: FeatureBag, b: FeatureBag) -> float:
    return float(_pair_prediction(model.config, _wrap(model.params), a, b).data.reshape(()))


def target_of(task: Task, pair) -> float:
    return pair.target_symdiff if Task(task) is Task.SYMDIFF else pair.target_intersection


def pair_loss_value(cfg: ModelConfig, params: dict[str, np.ndarray], pair) -> float:
    """Forward-only loss; the finite-difference oracle calls this."""
    pred = _pair_prediction(cfg, _wrap(params), pair.a, pair.b)
    return float(ad.squared_error(pred, target_of(cfg.task, pair)).data.reshape(()))


@dataclass
class LossResult:
    loss: float
    prediction: float
    grads: dict[str, np.ndarray]
    kink_distance: float = field(default=float("inf"))


def loss(model: Model, pair) -> LossResult:
    """Squared error of the predicted size against the pair's target, with gradients."""
    cfg = model.config
    tape = Tape()
    P = tape.watch(model.params)
    pred = _pair_prediction(cfg, P, pair.a, pair.b)
    out = ad.squared_error(pred, target_of(cfg.task, pair))
    value = float(out.data.reshape(()))
    if not np.isfinite(value):
        raise ad.NumericalError(f"non-finite loss (prediction {pred.data})")
    grads = tape.backward(out)
    return LossResult(value, float(pred.data.reshape(())), grads, tape.kink_distance)


def cross_wire(model: Model) -> Model:
    """Swap the fixed head for the other one; the training task is untouched."""
    head = model.config.head
    if head is Head.LEARNED_OP:
        raise ValueError("cannot cross-wire a learned-op head")
    other = Head.INTERSECTION_MIN if head is Head.SYMDIFF_L1 else Head.SYMDIFF_L1
    return replace(model, config=replace(model.config, head=other))
