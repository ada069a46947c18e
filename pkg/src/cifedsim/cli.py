"""Command-line front end.

Subcommands: synth, partition, train-source, adapt, evaluate, costs, grid.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric divergence.
Input files are never mutated.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .federation import (
    AGGREGATIONS,
    FedConfig,
    SFDA_METHODS,
    history_to_jsonl,
    run_adaptation,
    select_best,
)
from .feature_store import (
    FedfError,
    SynthSpec,
    generate_synthetic,
    read_fedf,
    rotation_transform,
    write_fedf,
)
from .head_model import DivergenceError, HeadFormatError, read_head, write_head
from .metrics_costs import CostLedger, cost_report, evaluate_mar
from .partitioner import ImbalanceProfile, build_partition_plan, load_plan
from .runner import resolve_config, run_grid
from .source_trainer import SourceConfig, train_source

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGENCE = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _cmd_synth(args) -> int:
    transform = None
    if args.rotate_degrees:
        transform = rotation_transform(args.dim, args.rotate_degrees, seed=args.rotate_seed)
    spec = SynthSpec.make(
        dim=args.dim, num_classes=args.classes, separability=args.separability,
        noise=args.noise, mean_seed=args.mean_seed, draw_seed=args.seed,
        transform=transform,
    )
    ds = generate_synthetic(spec, [args.per_class] * args.classes, domain_id=args.domain_id)
    write_fedf(ds, args.out)
    print(f"wrote {len(ds)} records to {args.out}")
    return EXIT_OK


def _cmd_partition(args) -> int:
    source = read_fedf(args.source)
    target = read_fedf(args.target)
    if args.source_kind == "balanced":
        profile = ImbalanceProfile("balanced")
    else:
        profile = ImbalanceProfile(
            "longtail", ratio=args.source_ratio, class_order_seed=args.class_order_seed
        )
    plan = build_partition_plan(
        source, target, profile,
        take_fraction=args.take_fraction, num_clients=args.clients,
        alpha=args.alpha, test_fraction=args.test_fraction,
        source_seed=args.source_seed, target_seed=args.target_seed,
        target_mode=args.target_mode,
    )
    plan.to_json(args.out)
    shard_sizes = [s.size for s in plan.client_shards]
    print(
        f"plan: source {len(plan.source_train)}/{len(plan.source_val)} train/val, "
        f"test {len(plan.target_test)}, shards {shard_sizes} -> {args.out}"
    )
    return EXIT_OK


def _cmd_train_source(args) -> int:
    source = read_fedf(args.source)
    target = read_fedf(args.target)
    plan = load_plan(args.plan, source, target)
    cfg = SourceConfig(
        epochs=args.epochs, batch_size=args.batch_size,
        learning_rate=args.learning_rate, weight_decay=args.weight_decay,
        label_smoothing=args.label_smoothing,
        balanced_sampling=args.balanced_sampling, seed=args.seed,
    )
    head, report = train_source(plan.source_train, plan.source_val, cfg)
    write_head(head, args.out)
    if args.report:
        with open(args.report, "w") as f:
            json.dump(report, f, indent=2)
    best = max(r["val_mar"] for r in report)
    print(f"source head -> {args.out} (best val MAR {best:.4f})")
    return EXIT_OK


def _cmd_adapt(args) -> int:
    source = read_fedf(args.source)
    target = read_fedf(args.target)
    plan = load_plan(args.plan, source, target)
    head = read_head(args.head)
    cfg = FedConfig(
        rounds=args.rounds, local_epochs=args.local_epochs,
        aggregation=args.aggregation, mu=args.mu, sfda_method=args.method,
        learning_rate=args.learning_rate, batch_size=args.batch_size,
        parallel_clients=args.parallel, seed=args.seed,
    )
    if args.save_rounds:
        os.makedirs(args.save_rounds, exist_ok=True)
    best, history = run_adaptation(plan, head, cfg, checkpoint_dir=args.save_rounds)
    write_head(best, args.out)
    if args.history:
        with open(args.history, "w") as f:
            f.write(history_to_jsonl(history) + "\n")
    test_mar = evaluate_mar(best, plan.target_test)
    print(
        f"adapted head -> {args.out} (best round {select_best(history)}, "
        f"test MAR {test_mar:.4f})"
    )
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    head = read_head(args.head)
    ds = read_fedf(args.data)
    print(f"{evaluate_mar(head, ds):.6f}")
    return EXIT_OK


def _cmd_costs(args) -> int:
    ledger = CostLedger(
        model_kind=args.model, mode=args.mode, rounds=args.rounds,
        clients=args.clients, num_classes=args.classes, in_dim=args.in_dim,
    )
    print(json.dumps(cost_report(ledger), indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_grid(args) -> int:
    user_cfg = None
    if args.config:
        with open(args.config) as f:
            user_cfg = json.load(f)
    cfg = resolve_config(user_cfg)
    results, failures = run_grid(
        user_cfg, workers=args.workers,
        out_dir=args.output_dir or cfg["output_dir"],
    )
    out = args.output_dir or cfg["output_dir"]
    print(f"{len(results)} cells -> {out} ({failures} failed)")
    if failures:
        for r in results:
            if r.error:
                print(f"  cell s{r.source_seed} t{r.target_seed}: {r.error}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cifedsim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic FEDF dataset")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--separability", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.28)
    p.add_argument("--mean-seed", type=int, default=7)
    p.add_argument("--seed", type=int, default=0, help="draw seed")
    p.add_argument("--rotate-degrees", type=float, default=0.0)
    p.add_argument("--rotate-seed", type=int, default=5)
    p.add_argument("--domain-id", default="synth")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("partition", help="build and export a partition plan")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--clients", type=int, default=3)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--take-fraction", type=float, default=0.6)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--source-kind", choices=("balanced", "longtail"), default="balanced")
    p.add_argument("--source-ratio", type=float, default=10.0)
    p.add_argument("--class-order-seed", type=int, default=0)
    p.add_argument("--source-seed", type=int, default=0)
    p.add_argument("--target-seed", type=int, default=0)
    p.add_argument("--target-mode", choices=("dirichlet", "stratified"), default="dirichlet")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_partition)

    p = sub.add_parser("train-source", help="train the source head from a plan")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--learning-rate", type=float, default=0.01)
    p.add_argument("--weight-decay", type=float, default=1e-3)
    p.add_argument("--label-smoothing", type=float, default=0.1)
    p.add_argument("--balanced-sampling", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.set_defaults(func=_cmd_train_source)

    p = sub.add_parser("adapt", help="run federated source-free adaptation")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--method", choices=SFDA_METHODS, default="shot")
    p.add_argument("--aggregation", choices=AGGREGATIONS, default="fedavg")
    p.add_argument("--mu", type=float, default=0.1)
    p.add_argument("--rounds", type=int, default=10)
    p.add_argument("--local-epochs", type=int, default=5)
    p.add_argument("--learning-rate", type=float, default=0.01)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--parallel", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="best head checkpoint path")
    p.add_argument("--history", help="round history JSONL path")
    p.add_argument("--save-rounds", help="directory for per-round head checkpoints")
    p.set_defaults(func=_cmd_adapt)

    p = sub.add_parser("evaluate", help="print a head's MAR on a FEDF dataset")
    p.add_argument("--head", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("costs", help="per-image FLOPs and transfer bytes")
    p.add_argument("--model", required=True)
    p.add_argument("--mode", choices=("fine_tune", "frozen", "skipped"), default="skipped")
    p.add_argument("--rounds", type=int, default=10)
    p.add_argument("--clients", type=int, default=3)
    p.add_argument("--classes", type=int, default=65)
    p.add_argument("--in-dim", type=int, default=None)
    p.set_defaults(func=_cmd_costs)

    p = sub.add_parser("grid", help="run the full experiment grid from a JSON config")
    p.add_argument("--config", help="JSON config; omitted keys use defaults")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--output-dir")
    p.set_defaults(func=_cmd_grid)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (FedfError, HeadFormatError, FileNotFoundError, IsADirectoryError,
            json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
