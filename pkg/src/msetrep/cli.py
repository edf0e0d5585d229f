"""``msetrep`` command line: data generation, training, evaluation and demos.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Flags override values from ``--config file.toml``; the TOML may use flat keys
or tables, with keys spelled like the long flags (``n_train`` or ``n-train``).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

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
from .datagen import BALANCED, UNIFORM, ObjectPool, SamplerConfig, SyntheticUniverseSpec, gen_universe, read_idx
from .harness import (
    MetricsWriter,
    TrainConfig,
    TrainingError,
    dump_representations,
    evaluate_containment,
    evaluate_sizes,
    log_report,
    run_cross_wire,
    train,
)
from .models import Head, Model, ModelConfig, Task, Variant

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("msetrep")


class UsageError(Exception):
    pass


def _sizes(text: str) -> tuple[int, int]:
    try:
        lo, hi = (int(v) for v in str(text).split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO:HI, got {text!r}") from None
    return lo, hi


def _widths(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    try:
        return tuple(int(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, got {text!r}") from None


# -- parser --------------------------------------------------------------------


def _add_universe(p):
    p.add_argument("--k", type=int, default=5, help="number of labels")
    p.add_argument("--d", type=int, default=16, help="feature dimension")
    p.add_argument("--sigma", type=float, default=1.0, help="isotropic noise std")
    p.add_argument("--prototype-scale", type=float, default=4.0)
    p.add_argument("--n-train", type=int, default=5000)
    p.add_argument("--n-eval", type=int, default=2000)


def _add_model(p):
    p.add_argument("--variant", choices=[v.value for v in Variant], default="simplex")
    p.add_argument("--task", choices=[t.value for t in Task], default="symdiff")
    p.add_argument("--head", choices=[h.value for h in Head], default=None, help="default: matched to --task")
    p.add_argument("--rep-dim", type=int, default=None, help="representation size; default: number of labels")
    p.add_argument("--hidden", type=_widths, default=(64, 64))
    p.add_argument("--rho1", type=_widths, default=(100, 100))
    p.add_argument("--rho2", type=_widths, default=(100,))


def _add_training(p):
    p.add_argument("--iters", type=int, default=30000)
    p.add_argument("--lr", type=float, default=5e-5)
    p.add_argument("--beta1", type=float, default=0.9)
    p.add_argument("--beta2", type=float, default=0.999)
    p.add_argument("--train-sizes", type=_sizes, default=(2, 5))
    p.add_argument("--sampler", choices=[UNIFORM, BALANCED], default=UNIFORM)
    p.add_argument("--sampler-seed", type=int, default=0)


def _add_data(p, name, required=True):
    p.add_argument(f"--{name}", required=required, help="object pool CSV (id,label,f1..fd)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msetrep", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="TOML file; flags given on the command line win")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic train/eval pools as CSV")
    _add_universe(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default=".")
    p.add_argument("--mnist-images", help="convert an IDX image file instead of sampling")
    p.add_argument("--mnist-labels")

    p = sub.add_parser("train", help="train one model; writes a checkpoint and JSONL metrics")
    _add_data(p, "train-data")
    _add_data(p, "eval-data", required=False)
    _add_model(p)
    _add_training(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--metrics", help="JSONL path (default: checkpoint with .jsonl)")
    p.add_argument("--eval-sizes", type=_sizes, default=(2, 5))
    p.add_argument("--eval-pairs", type=int, default=3000)

    p = sub.add_parser("eval", help="size MAE or containment accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    _add_data(p, "data")
    p.add_argument("--sizes", type=_sizes, default=None, help="LO:HI (default 2:20, or 2:5 with --containment)")
    p.add_argument("--pairs", type=int, default=30000)
    p.add_argument("--containment", action="store_true")
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="also write the JSON report here")
    p.add_argument("--metrics", help="append an eval event to this JSONL file")

    p = sub.add_parser("cross-wire", help="matched vs swapped head on identical data")
    _add_data(p, "train-data")
    _add_data(p, "eval-data")
    _add_model(p)
    _add_training(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval-sizes", type=_sizes, default=(2, 5))
    p.add_argument("--eval-pairs", type=int, default=3000)
    p.add_argument("--out")

    p = sub.add_parser("dump-reps", help="per-object embeddings as CSV")
    p.add_argument("--checkpoint", required=True)
    _add_data(p, "data")
    p.add_argument("--out", required=True)

    p = sub.add_parser("cluster-demo", help="certificates and adaptive recovery on random instances")
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)

    sub.add_parser("selfcheck", help="run the built-in invariant suites")
    return parser


# -- config file ---------------------------------------------------------------


def _flatten(table: dict, out: dict) -> dict:
    for key, value in table.items():
        if isinstance(value, dict):
            _flatten(value, out)
        else:
            out[key.replace("-", "_")] = value
    return out


def load_config(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return _flatten(tomllib.load(fh), {})
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"bad TOML in {path}: {exc}") from None


def _subcommand(parser: argparse.ArgumentParser, argv) -> str | None:
    choices = parser._subparsers._group_actions[0].choices
    return next((tok for tok in argv if tok in choices), None)


def parse_args(argv=None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    command = _subcommand(parser, argv)
    if known.config is None or command is None:
        return parser.parse_args(argv)
    values = load_config(known.config)
    sub = parser._subparsers._group_actions[0].choices[command]
    actions = {a.dest: a for a in sub._actions}
    unknown = sorted(set(values) - set(actions) - {"config", "verbose"})
    if unknown:
        raise UsageError(f"unknown keys in {known.config} for '{command}': {', '.join(unknown)}")
    converted = {}
    for key, value in values.items():
        action = actions.get(key)
        if action is None:
            continue
        if action.type is not None and not isinstance(value, bool):
            try:
                value = action.type(value if action.type in (_sizes, _widths) else str(value))
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"config key {key}: {exc}") from None
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"config key {key}: {value!r} not one of {sorted(action.choices)}")
        converted[key] = value
    # File values become defaults, so explicit flags still win.
    sub.set_defaults(**converted)
    for action in sub._actions:
        if action.dest in converted:
            action.required = False
    return parser.parse_args(argv)


# -- commands ------------------------------------------------------------------


def _load_pool(path) -> ObjectPool:
    if not Path(path).is_file():
        raise FileNotFoundError(f"no such data file: {path}")
    return ObjectPool.from_csv(path)


def _validated(fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None


def _emit(report: dict, out=None) -> None:
    text = json.dumps(report, indent=2)
    print(text)
    if out:
        Path(out).write_text(text + "\n")


def cmd_gen_data(args) -> int:
    out = Path(args.out_dir)
    if args.mnist_images or args.mnist_labels:
        if not (args.mnist_images and args.mnist_labels):
            raise UsageError("--mnist-images and --mnist-labels go together")
        pool = read_idx(args.mnist_images, args.mnist_labels)
        out.mkdir(parents=True, exist_ok=True)
        pool.to_csv(out / "pool.csv")
        print(json.dumps({"pool": str(out / "pool.csv"), "objects": len(pool), "k": pool.k}))
        return 0
    spec = _validated(
        SyntheticUniverseSpec, args.k, args.d, args.prototype_scale, args.sigma, args.n_train, args.n_eval, args.seed
    )
    train_pool, eval_pool = gen_universe(spec)
    out.mkdir(parents=True, exist_ok=True)
    train_pool.to_csv(out / "train.csv")
    eval_pool.to_csv(out / "eval.csv")
    print(json.dumps({"train": str(out / "train.csv"), "eval": str(out / "eval.csv"), "k": spec.k, "d": spec.d}))
    return 0


def _train_config(args, input_dim: int, k: int, checkpoint=None) -> TrainConfig:
    task = Task(args.task)
    head = Head(args.head) if args.head else task.matched_head
    model = _validated(
        ModelConfig,
        Variant(args.variant),
        head,
        task,
        input_dim,
        args.rep_dim or k,
        hidden=args.hidden,
        rho1_widths=args.rho1,
        rho2_hidden=args.rho2,
    )
    sampler = _validated(SamplerConfig, *args.train_sizes, args.sampler, args.sampler_seed)
    return _validated(
        TrainConfig, model, sampler, args.iters, args.lr, args.beta1, args.beta2, args.seed, checkpoint
    )


def _check_positive(**values):
    for name, v in values.items():
        if v < 1:
            raise UsageError(f"--{name.replace('_', '-')} must be >= 1")


def cmd_train(args) -> int:
    _check_positive(iters=args.iters, eval_pairs=args.eval_pairs)
    pool = _load_pool(args.train_data)
    cfg = _train_config(args, pool.dim, pool.k, args.checkpoint)
    eval_pool = _load_pool(args.eval_data) if args.eval_data else None
    metrics_path = args.metrics or str(Path(args.checkpoint).with_suffix(".jsonl"))
    Path(args.checkpoint).parent.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    with MetricsWriter(metrics_path, cfg.config_hash(), cfg.seed) as metrics:
        result = train(cfg, pool, metrics)
        summary = {
            "checkpoint": args.checkpoint,
            "metrics": metrics_path,
            "config_hash": cfg.config_hash(),
            "final_loss": result.curve[-1][1],
        }
        if eval_pool is not None:
            sizes = evaluate_sizes(result.model, eval_pool, args.eval_sizes, args.eval_pairs, cfg.seed)
            contain = evaluate_containment(result.model, eval_pool, args.eval_pairs, 1.0, args.eval_sizes, cfg.seed)
            log_report(metrics, sizes, cfg.iterations)
            log_report(metrics, contain, cfg.iterations)
            summary.update(
                mae_symdiff=sizes.mae_symdiff,
                mae_intersection=sizes.mae_intersection,
                containment_accuracy=contain.containment_accuracy,
            )
    summary["seconds"] = round(time.perf_counter() - t0, 2)
    _emit(summary)
    return 0


def cmd_eval(args) -> int:
    _check_positive(pairs=args.pairs)
    if not args.tau > 0:
        raise UsageError("--tau must be > 0")
    sizes = args.sizes or ((2, 5) if args.containment else (2, 20))
    if not 2 <= sizes[0] <= sizes[1]:
        raise UsageError("--sizes needs 2 <= LO <= HI")
    if not Path(args.checkpoint).is_file():
        raise FileNotFoundError(f"no such checkpoint: {args.checkpoint}")
    model = Model.load(args.checkpoint)
    pool = _load_pool(args.data)
    if args.containment:
        report = evaluate_containment(model, pool, args.pairs, args.tau, sizes, args.seed)
    else:
        report = evaluate_sizes(model, pool, sizes, args.pairs, args.seed)
    if args.metrics:
        with open(args.metrics, "a") as fh:
            log_report(MetricsWriter(fh, "", args.seed), report, int(model.store.step))
    _emit(report.to_dict(), args.out)
    return 0


def cmd_cross_wire(args) -> int:
    _check_positive(iters=args.iters, eval_pairs=args.eval_pairs)
    if args.variant != Variant.SIMPLEX.value:
        raise UsageError("cross-wire runs the simplex variant")
    if args.head == Head.LEARNED_OP.value:
        raise UsageError("cross-wire needs a fixed head")
    pool = _load_pool(args.train_data)
    eval_pool = _load_pool(args.eval_data)
    cfg = _train_config(args, pool.dim, pool.k)
    report = run_cross_wire(cfg, pool, eval_pool, args.eval_sizes, args.eval_pairs, cfg.seed)
    _emit(report.to_dict(), args.out)
    return 0


def cmd_dump_reps(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise FileNotFoundError(f"no such checkpoint: {args.checkpoint}")
    model = Model.load(args.checkpoint)
    pool = _load_pool(args.data)
    dump_representations(model, pool, args.out)
    print(json.dumps({"out": args.out, "rows": len(pool)}))
    return 0


def cmd_cluster_demo(args) -> int:
    if not 1 <= args.k <= args.n:
        raise UsageError("need 1 <= --k <= --n")
    _check_positive(instances=args.instances)
    rng = np.random.default_rng(args.seed)
    totals = {"instances": 0, "verified": 0, "perturbations_rejected": 0, "perturbations": 0, "recovered": 0}
    for i in range(args.instances):
        inst = random_instance(rng, args.n, args.k)
        truth = inst.true_clusters()
        oracle = CountingOracle(inst)
        cert = build_certificate(inst, truth)
        ok = verify_certificate(cert, oracle)
        wrong = []
        if any(len(c) > 1 for c in truth):
            wrong.append(split_one(truth, rng))
            if len(truth) > 1:
                wrong.append(swap_one(truth, rng))
        if len(truth) > 1:
            wrong.append(merge_two(truth, rng))
        rejected = sum(not verify_certificate(build_certificate(inst, w), oracle) for w in wrong)
        counter = CountingOracle(inst)
        rec = recover_adaptive(inst.objects, counter)
        exact = same_partition(rec.clusters, truth)
        print(
            f"instance {i}: certificate queries: {len(cert.queries)} "
            f"(split {cert.count('split')}, singleton {cert.count('singleton')}); "
            f"verified: {ok}; perturbations rejected: {rejected}/{len(wrong)}; "
            f"adaptive queries: {counter.queries}; adaptive exact: {exact}"
        )
        totals["instances"] += 1
        totals["verified"] += ok
        totals["perturbations"] += len(wrong)
        totals["perturbations_rejected"] += rejected
        totals["recovered"] += exact
    print(json.dumps(totals))
    good = totals["verified"] == totals["recovered"] == totals["instances"]
    return 0 if good and totals["perturbations_rejected"] == totals["perturbations"] else 1


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_all

    results = run_all()
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'}  {r.name}: {r.detail} ({r.seconds:.2f}s)")
    return 0 if all(r.ok for r in results) else 1


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "cross-wire": cmd_cross_wire,
    "dump-reps": cmd_dump_reps,
    "cluster-demo": cmd_cluster_demo,
    "selfcheck": cmd_selfcheck,
}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"msetrep: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"msetrep: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, TrainingError, ValueError) as exc:
        print(f"msetrep: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
