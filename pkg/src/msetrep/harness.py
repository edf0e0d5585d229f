"""Training loop, size/containment evaluation and the cross-wiring experiment."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from . import autodiff as ad
from .datagen import BALANCED, UNIFORM, ObjectPool, PairSample, PairSampler, SamplerConfig
from .models import Head, Model, ModelConfig, Task, Variant, cross_wire, embed_objects, loss, predict_pair
from .multiset import DEFAULT_TAU, ContainmentRelation, relation_from_sizes
from .transform import ground_truth_pair

log = logging.getLogger(__name__)

SMOOTHING_WINDOW = 100


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    iterations: int = 30000
    learning_rate: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("checkpoint_path")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


class MetricsWriter:
    """JSON Lines sink; one object per event."""

    def __init__(self, target=None, config_hash: str = "", seed: int = 0):
        self._own = isinstance(target, (str, Path))
        self._fh = open(target, "w") if self._own else target
        self.config_hash = config_hash
        self.seed = seed

    def write(self, event: str, **fields) -> None:
        if self._fh is None:
            return
        record = {"event": event, **fields, "config_hash": self.config_hash, "seed": self.seed}
        self._fh.write(json.dumps(record) + "\n")

    def close(self) -> None:
        if self._own and self._fh is not None:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _streams(cfg: TrainConfig) -> tuple[int, np.random.Generator]:
    init_seq, data_seq = np.random.SeedSequence([cfg.seed, cfg.sampler.seed]).spawn(2)
    return int(init_seq.generate_state(1)[0]), np.random.default_rng(data_seq)


@dataclass
class TrainResult:
    model: Model
    curve: list[tuple[int, float]]
    losses: np.ndarray


def train(cfg: TrainConfig, pool: ObjectPool, metrics: MetricsWriter | None = None) -> TrainResult:
    """Per-pair Adam updates on fresh pairs from ``pool``.

    Model init and the data stream come from independent children of
    ``(seed, sampler.seed)``, so variants trained with the same seeds see the
    same pairs in the same order.
    """
    if pool.dim != cfg.model.input_dim:
        raise ValueError(f"pool has {pool.dim} features, model expects {cfg.model.input_dim}")
    init_seed, data_rng = _streams(cfg)
    model = Model.create(cfg.model, seed=init_seed, lr=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2)
    sampler = PairSampler(pool, cfg.sampler, data_rng)
    store = model.store
    losses = np.empty(cfg.iterations)
    curve = []
    for it in range(cfg.iterations):
        pair = next(sampler)
        try:
            res = loss(replace(model, store=store), pair)
            store = ad.adam_step(store, res.grads)
        except ad.NumericalError as exc:
            raise TrainingError(
                f"iteration {it + 1}: {exc}; |A|={pair.size_a:g} |B|={pair.size_b:g} "
                f"targets=({pair.target_symdiff:g}, {pair.target_intersection:g})"
            ) from exc
        losses[it] = res.loss
        if (it + 1) % SMOOTHING_WINDOW == 0 or it + 1 == cfg.iterations:
            window = losses[max(0, it + 1 - SMOOTHING_WINDOW) : it + 1]
            mean = float(window.mean())
            curve.append((it + 1, mean))
            if metrics is not None:
                metrics.write("train_step", iter=it + 1, loss=mean)
    model = replace(model, store=store)
    if cfg.checkpoint_path:
        model.save(cfg.checkpoint_path)
    return TrainResult(model, curve, losses)


# -- predictors ----------------------------------------------------------------


class Predictor(Protocol):
    task: Task

    def __call__(self, pair: PairSample) -> float: ...


class ModelPredictor:
    def __init__(self, model: Model):
        self.model = model
        self.task = model.config.task

    def __call__(self, pair: PairSample) -> float:
        return predict_pair(self.model, pair.a, pair.b)


class OraclePredictor:
    """Exact sizes from the true labeling (the natural representation of the pushforward)."""

    def __init__(self, pool: ObjectPool, task: Task = Task.SYMDIFF):
        self.t = pool.transformation()
        self.task = Task(task)

    def __call__(self, pair: PairSample) -> float:
        truth = ground_truth_pair(self.t, pair.a_ids, pair.b_ids)
        return truth.symdiff if self.task is Task.SYMDIFF else truth.intersection


class FunctionPredictor:
    def __init__(self, fn: Callable[[PairSample], float], task: Task = Task.SYMDIFF):
        self.fn = fn
        self.task = Task(task)

    def __call__(self, pair: PairSample) -> float:
        return self.fn(pair)


def as_predictor(obj) -> Predictor:
    return ModelPredictor(obj) if isinstance(obj, Model) else obj


def _symdiff_estimate(pred: float, task: Task, a: float, b: float) -> float:
    return pred if task is Task.SYMDIFF else a + b - 2.0 * pred


# -- evaluation ----------------------------------------------------------------


@dataclass
class EvalReport:
    n_pairs: int
    size_range: tuple[int, int]
    mae_symdiff: float | None = None
    mae_intersection: float | None = None
    containment_accuracy: float | None = None
    confusion: list[list[int]] | None = None
    tau: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["size_range"] = list(self.size_range)
        if self.confusion is not None:
            d["confusion_labels"] = [r.value for r in ContainmentRelation]
        return d


def _eval_rng(seed: int, salt: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, salt]))


def evaluate_sizes(model, pool: ObjectPool, size_range=(2, 20), n_pairs: int = 30000, seed: int = 0) -> EvalReport:
    """MAE over fresh uniform pairs from ``pool``.

    The configured task is scored directly; the other size is derived from it
    through ``|A^B| = |A| + |B| - 2|AnB|``.
    """
    pred_fn = as_predictor(model)
    task = pred_fn.task
    lo, hi = size_range
    sampler = PairSampler(pool, SamplerConfig(lo, hi, UNIFORM), _eval_rng(seed, 1))
    err_d = np.empty(n_pairs)
    err_i = np.empty(n_pairs)
    for n in range(n_pairs):
        pair = next(sampler)
        a, b = pair.size_a, pair.size_b
        d_hat = _symdiff_estimate(pred_fn(pair), task, a, b)
        err_d[n] = abs(d_hat - pair.target_symdiff)
        err_i[n] = abs((a + b - d_hat) / 2.0 - pair.target_intersection)
    return EvalReport(n_pairs, (lo, hi), mae_symdiff=float(err_d.mean()), mae_intersection=float(err_i.mean()))


def confusion_accuracy(confusion: np.ndarray) -> float:
    total = int(confusion.sum())
    return float(np.trace(confusion)) / total if total else math.nan


def evaluate_containment(
    model, pool: ObjectPool, n_pairs: int = 30000, tau: float = DEFAULT_TAU, size_range=(2, 5), seed: int = 0
) -> EvalReport:
    """Four-way relation accuracy on relation-balanced pairs.

    Rows of the confusion matrix are true relations, columns predicted, both
    in ``ContainmentRelation`` declaration order.
    """
    pred_fn = as_predictor(model)
    lo, hi = size_range
    sampler = PairSampler(pool, SamplerConfig(lo, hi, BALANCED), _eval_rng(seed, 2))
    confusion = np.zeros((4, 4), dtype=np.int64)
    for _ in range(n_pairs):
        pair = next(sampler)
        a, b = pair.size_a, pair.size_b
        d_hat = _symdiff_estimate(pred_fn(pair), pred_fn.task, a, b)
        guess = relation_from_sizes(a, b, d_hat, tau)
        confusion[pair.relation.index, guess.index] += 1
    return EvalReport(
        n_pairs,
        (lo, hi),
        containment_accuracy=confusion_accuracy(confusion),
        confusion=confusion.tolist(),
        tau=tau,
    )


def log_report(metrics: MetricsWriter | None, report: EvalReport, iteration: int) -> None:
    if metrics is None:
        return
    fields = {"iter": iteration}
    for key in ("mae_symdiff", "mae_intersection", "containment_accuracy"):
        value = getattr(report, key)
        if value is not None:
            fields[key] = value
    if report.confusion is not None:
        fields["confusion"] = [int(c) for row in report.confusion for c in row]
    metrics.write("eval", **fields)


# -- experiments ---------------------------------------------------------------


@dataclass
class CrossWireReport:
    task: str
    matched_mae: float
    cross_wired_mae: float
    ratio: float
    matched_head: str
    cross_wired_head: str

    def to_dict(self) -> dict:
        return asdict(self)


def run_cross_wire(
    cfg: TrainConfig,
    train_pool: ObjectPool,
    eval_pool: ObjectPool,
    size_range=(2, 5),
    n_pairs: int = 30000,
    eval_seed: int = 0,
) -> CrossWireReport:
    """Train the matched head and the swapped head on identical seeds and data; compare MAE."""
    if cfg.model.variant is not Variant.SIMPLEX:
        raise ValueError("cross-wiring is defined for the simplex variant")
    if cfg.model.head is Head.LEARNED_OP:
        raise ValueError("cross-wiring needs a fixed head")
    matched_cfg = replace(cfg, model=replace(cfg.model, head=cfg.model.task.matched_head))
    crossed_model_cfg = cross_wire(Model(matched_cfg.model, None)).config
    crossed_cfg = replace(matched_cfg, model=crossed_model_cfg, checkpoint_path=None)
    matched = train(replace(matched_cfg, checkpoint_path=None), train_pool).model
    crossed = train(crossed_cfg, train_pool).model
    key = "mae_symdiff" if cfg.model.task is Task.SYMDIFF else "mae_intersection"
    m = getattr(evaluate_sizes(matched, eval_pool, size_range, n_pairs, eval_seed), key)
    c = getattr(evaluate_sizes(crossed, eval_pool, size_range, n_pairs, eval_seed), key)
    return CrossWireReport(
        cfg.model.task.value, m, c, c / m if m > 0 else math.inf,
        matched_cfg.model.head.value, crossed_model_cfg.head.value,
    )


def dump_representations(model: Model, pool: ObjectPool, out) -> np.ndarray:
    """Write ``id,label,e1..e_k`` per object; returns the embedding matrix."""
    emb = embed_objects(model, pool.features)
    header = ["id", "label"] + [f"e{i + 1}" for i in range(emb.shape[1])]
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for x, y, row in zip(pool.ids, pool.labels, emb):
        buf.write(f"{int(x)},{int(y)}," + ",".join(repr(float(v)) for v in row) + "\n")
    if hasattr(out, "write"):
        out.write(buf.getvalue())
    else:
        Path(out).write_text(buf.getvalue())
    return emb


def basis_distance(emb: np.ndarray) -> np.ndarray:
    """l1 distance from each row to its nearest standard basis vector."""
    emb = np.atleast_2d(emb)
    j = emb.argmax(axis=1)
    nearest = np.zeros_like(emb)
    nearest[np.arange(emb.shape[0]), j] = 1.0
    return np.abs(emb - nearest).sum(axis=1)
