"""Invariant suites run by ``msetrep selfcheck``.

Each suite returns a ``CheckResult``; none of them trains a model, so the whole
run finishes in seconds.
"""

from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .clustering import (
    CountingOracle,
    build_certificate,
    merge_two,
    random_instance,
    recover_adaptive,
    same_partition,
    split_one,
    swap_one,
    verify_certificate,
)
from .datagen import PairSampler, SamplerConfig, SyntheticUniverseSpec, gen_universe
from .models import FeatureBag, Head, Model, ModelConfig, Task, Variant, loss, pair_loss_value, represent
from .multiset import (
    Multiset,
    cardinality,
    containment_relation,
    difference,
    intersect,
    intersection_size_from_reps,
    is_subset,
    msum,
    natural_representation,
    sym_difference,
    symdiff_size_from_reps,
)

GRAD_TOL = 1e-4
FD_STEP = 1e-5
# Pre-activations and l1/min arguments closer than this to a kink are skipped:
# a central difference of size h moves them by roughly h * |input| there.
KINK_MARGIN = 1e-3
# Below this gradient norm the central difference is pure roundoff (about
# eps * loss / h), so a relative error carries no information.
VANISHING_GRAD = 1e-6


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float = 0.0


def random_multiset(rng: np.random.Generator, universe: int = 8, max_mult: int = 5) -> Multiset:
    return Multiset({x: int(rng.integers(0, max_mult + 1)) for x in range(1, universe + 1)})


def algebra_violations(rng: np.random.Generator, n_pairs: int) -> list[str]:
    bad = []
    for _ in range(n_pairs):
        a, b = random_multiset(rng), random_multiset(rng)
        if cardinality(sym_difference(a, b)) != cardinality(a) + cardinality(b) - 2 * cardinality(intersect(a, b)):
            bad.append(f"size identity: {a} {b}")
        if difference(a, difference(a, b)) != intersect(a, b):
            bad.append(f"double difference: {a} {b}")
        if sym_difference(a, b) != msum(difference(a, b), difference(b, a)):
            bad.append(f"symdiff split: {a} {b}")
        by_sizes = cardinality(sym_difference(a, b)) <= cardinality(b) - cardinality(a)
        if is_subset(a, b) != by_sizes:
            bad.append(f"containment by sizes: {a} {b}")
    return bad


def rep_violations(rng: np.random.Generator, n_pairs: int, universe: int = 8) -> list[str]:
    bad = []
    for _ in range(n_pairs):
        a, b = random_multiset(rng, universe), random_multiset(rng, universe)
        ra, rb = natural_representation(a, universe), natural_representation(b, universe)
        if symdiff_size_from_reps(ra, rb) != cardinality(sym_difference(a, b)):
            bad.append(f"symdiff: {a} {b}")
        if intersection_size_from_reps(ra, rb) != cardinality(intersect(a, b)):
            bad.append(f"intersection: {a} {b}")
    return bad


def small_config(variant: Variant, head: Head, task: Task = Task.SYMDIFF, input_dim: int = 4, rep_dim: int = 3) -> ModelConfig:
    """Narrow networks so a full central-difference sweep stays cheap."""
    return ModelConfig(variant, head, task, input_dim, rep_dim, hidden=(8, 8), rho1_widths=(6, 6), rho2_hidden=(6,))


def gradient_check(cfg: ModelConfig, pair, seed: int, h: float = FD_STEP, kink_margin: float = KINK_MARGIN):
    """Relative error between tape and central-difference gradients.

    Returns ``None`` for draws that cannot be scored: near a kink, or with a
    vanishing gradient (e.g. every ReLU in a layer dead at init).
    """
    model = Model.create(cfg, seed=seed)
    res = loss(model, pair)
    if res.kink_distance < kink_margin:
        return None
    if math.sqrt(sum(float(np.sum(g * g)) for g in res.grads.values())) < VANISHING_GRAD:
        return None
    fd = ad.finite_difference_gradient(lambda p: pair_loss_value(cfg, p, pair), model.params, h)
    return ad.gradient_relative_error(res.grads, fd)


def gradient_errors(cfg: ModelConfig, draws: int, seed: int = 0, size_range=(2, 4)) -> tuple[list[float], int]:
    """Errors for ``draws`` accepted draws, plus how many unscorable draws were skipped."""
    spec = SyntheticUniverseSpec(k=cfg.rep_dim, d=cfg.input_dim, prototype_scale=1.0, n_train=60, n_eval=10, seed=seed)
    pool, _ = gen_universe(spec)
    sampler = PairSampler(pool, SamplerConfig(*size_range, seed=seed))
    errors, skipped, n = [], 0, 0
    while len(errors) < draws:
        if skipped > 20 * draws:
            raise RuntimeError(f"{cfg.variant.value}/{cfg.head.value}: too many unscorable draws")
        err = gradient_check(cfg, next(sampler), seed * 100003 + n)
        n += 1
        if err is None:
            skipped += 1
        else:
            errors.append(err)
    return errors, skipped


def variant_configs(**kw) -> list[ModelConfig]:
    out = []
    for v in Variant:
        out.append(small_config(v, Head.SYMDIFF_L1, **kw))
        out.append(small_config(v, Head.LEARNED_OP, **kw))
    return out


def _timed(name, fn) -> CheckResult:
    t0 = time.perf_counter()
    try:
        ok, detail = fn()
    except Exception as exc:  # a crashing suite is a failing suite
        ok, detail = False, f"{type(exc).__name__}: {exc}"
    return CheckResult(name, ok, detail, time.perf_counter() - t0)


def _algebra():
    bad = algebra_violations(np.random.default_rng(0), 2000)
    return not bad, f"{len(bad)} violations" + (f", first {bad[0]}" if bad else "")


def _reps():
    bad = rep_violations(np.random.default_rng(1), 2000)
    return not bad, f"{len(bad)} violations"


def _cardinality():
    rng = np.random.default_rng(2)
    worst = 0.0
    for i in range(100):
        cfg = ModelConfig(Variant.SIMPLEX, Head.SYMDIFF_L1, Task.SYMDIFF, 4, int(rng.integers(2, 7)), hidden=(8,))
        model = Model.create(cfg, seed=i)
        n = int(rng.integers(1, 6))
        bag = FeatureBag(rng.standard_normal((n, 4)) * 3, rng.uniform(0.1, 4, n))
        worst = max(worst, abs(represent(model, bag).sum() - bag.size))
    return worst <= 1e-9, f"max |sum(rep) - |A|| = {worst:.2e}"


def _gradients():
    worst = 0.0
    for cfg in variant_configs():
        errs, _ = gradient_errors(cfg, 3, seed=3)
        worst = max(worst, max(errs))
    return worst <= GRAD_TOL, f"max relative error {worst:.2e}"


def _contain_relation():
    rng = np.random.default_rng(4)
    for _ in range(500):
        a, b = random_multiset(rng, 4, 2), random_multiset(rng, 4, 2)
        rel = containment_relation(a, b)
        if containment_relation(b, a).value != {
            "proper_subset": "proper_superset",
            "proper_superset": "proper_subset",
        }.get(rel.value, rel.value):
            return False, f"asymmetric relation for {a}, {b}"
    return True, "ok"


def _checkpoint():
    cfg = small_config(Variant.DEEPSETS, Head.LEARNED_OP)
    model = Model.create(cfg, seed=5)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "m.bin"
        model.save(path)
        back = Model.load(path)
    same = back.config == cfg and all(np.array_equal(model.params[k], back.params[k]) for k in model.params)
    return same, "round trip exact" if same else "round trip changed parameters"


def _clustering():
    rng = np.random.default_rng(6)
    for _ in range(30):
        n = int(rng.integers(2, 30))
        k = int(rng.integers(1, min(n, 6) + 1))
        inst = random_instance(rng, n, k)
        truth = inst.true_clusters()
        cert = build_certificate(inst, truth)
        oracle = CountingOracle(inst)
        if len(cert.queries) != n - 1 or not verify_certificate(cert, oracle):
            return False, f"certificate failed on n={n} k={k}"
        splittable = any(len(c) > 1 for c in truth)
        wrong = [split_one(truth, rng)] if splittable else []
        if k >= 2:
            wrong.append(merge_two(truth, rng))
            if splittable:
                wrong.append(swap_one(truth, rng))
        if any(verify_certificate(build_certificate(inst, w), oracle) for w in wrong):
            return False, f"accepted a wrong clustering on n={n} k={k}"
        if not same_partition(recover_adaptive(inst.objects, oracle).clusters, truth):
            return False, f"adaptive recovery wrong on n={n} k={k}"
    return True, "30 instances"


SUITES = [
    ("multiset algebra", _algebra),
    ("representation sizes", _reps),
    ("containment symmetry", _contain_relation),
    ("simplex cardinality", _cardinality),
    ("gradients", _gradients),
    ("checkpoint round trip", _checkpoint),
    ("clustering certificates", _clustering),
]


def run_all() -> list[CheckResult]:
    return [_timed(name, fn) for name, fn in SUITES]
