"""Command-line interface.

Subcommands: prepare-data, train, evaluate, ablate, sweep-experts, bench-moe,
report.  Every command takes --config (YAML experiment document), --seed
(overrides the training seed), and --out (artifact directory).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

from .consensus import load_consensus
from .data import write_id_map
from .errors import MltfrError
from .evaluation import compute_improvement, evaluate_model
from .experiment import (
    ExperimentConfig,
    benchmark_moe_scaling,
    build_vocabularies,
    load_experiment_config,
    read_metrics,
    resolve_dataset,
    run_experiment,
    sweep_experts,
    write_metrics,
)
from .data import split_leave_one_out
from .model import Recommender
from .training import load_checkpoint

logger = logging.getLogger(__name__)


def _add_common(sub: argparse.ArgumentParser, config_required: bool = True) -> None:
    sub.add_argument("--config", required=config_required, help="experiment YAML document")
    sub.add_argument("--seed", type=int, default=None, help="override the training seed")
    sub.add_argument("--out", default=None, help="artifact output directory")


def _load_config(args) -> ExperimentConfig:
    cfg = load_experiment_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
    return cfg


def _print_metrics(title: str, k: int, hr: float, ndcg: float, extra: str = "") -> None:
    print(f"{title:<18} HR@{k} {hr:.5f}   NDCG@{k} {ndcg:.5f}{extra}")


def cmd_prepare_data(args) -> int:
    cfg = _load_config(args)
    data = resolve_dataset(cfg.dataset)
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "interactions.txt"), "w", encoding="utf-8") as fh:
        for seq in data.sequences:
            fh.write(f"{seq.user_id} {' '.join(str(i) for i in seq.items)}\n")
    if data.item_id_map:
        write_id_map(os.path.join(out, "items.map"), data.item_id_map)
    if data.user_id_map:
        write_id_map(os.path.join(out, "users.map"), data.user_id_map)
    n_interactions = sum(len(s.items) for s in data.sequences)
    print(
        f"prepared {len(data.sequences)} users, {data.n_items} items, "
        f"{n_interactions} interactions -> {out}"
    )
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    outcome = run_experiment(cfg, out_dir=args.out)
    report = outcome.report
    _print_metrics(f"{cfg.variant} (seed {cfg.train.seed})", report.k, report.hr, report.ndcg)
    if args.out:
        print(f"artifacts written to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    data = resolve_dataset(cfg.dataset)
    _, holdout = split_leave_one_out(data.sequences)
    vocabs = build_vocabularies(cfg) if cfg.variant != "backbone_only" else []
    model = Recommender(
        n_items=data.n_items, vocabularies=vocabs, backbone_cfg=cfg.backbone,
        filter_cfg=cfg.filter, reprogram_heads=cfg.model.reprogram_heads,
        alpha=cfg.model.alpha, variant=cfg.variant, seed=cfg.train.seed,
        dtype=cfg.torch_dtype(),
    )
    consensus_dir = os.path.join(args.checkpoint, os.pardir, "consensus")
    if cfg.variant == "full" and os.path.isdir(consensus_dir):
        model.attach_consensus(
            load_consensus(consensus_dir, cfg.model.reprogram_heads, cfg.torch_dtype())
        )
    load_checkpoint(args.checkpoint, model)
    report = evaluate_model(model, holdout, cfg.eval_k)
    _print_metrics(f"{cfg.variant} (restored)", report.k, report.hr, report.ndcg)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_metrics(
            os.path.join(args.out, "metrics.txt"),
            {
                "variant": cfg.variant,
                "k": report.k,
                f"hr@{report.k}": repr(report.hr),
                f"ndcg@{report.k}": repr(report.ndcg),
                "n_users": report.n_users,
            },
        )
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    reports = {}
    for variant in ("wo_sc", "full"):
        sub_out = os.path.join(args.out, variant) if args.out else None
        outcome = run_experiment(replace(cfg, variant=variant), out_dir=sub_out)
        reports[variant] = outcome.report
    base, full = reports["wo_sc"], reports["full"]
    imp = compute_improvement(base.hr, base.ndcg, full.hr, full.ndcg)
    _print_metrics("wo_sc", base.k, base.hr, base.ndcg)
    _print_metrics("full", full.k, full.hr, full.ndcg, extra=f"   Imp. {imp:+.2f}%")
    return 0


def cmd_sweep_experts(args) -> int:
    cfg = _load_config(args)
    rows = sweep_experts(cfg, args.max_experts, out_dir=args.out)
    for m, report in rows:
        _print_metrics(f"n_experts={m}", report.k, report.hr, report.ndcg)
    return 0


def cmd_bench_moe(args) -> int:
    out_path = None
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        out_path = os.path.join(args.out, "timing.csv")
    bench = benchmark_moe_scaling(
        list(range(1, args.max_experts + 1)), repetitions=args.repetitions, out_path=out_path
    )
    for row in bench.rows:
        print(f"n_experts={row.n_experts}  median {row.median_ms:9.3f} ms  residual {row.fit_residual:+8.3f} ms")
    print(
        f"linear fit: {bench.slope_ms:.3f} ms/expert + {bench.intercept_ms:.3f} ms, "
        f"R^2 {bench.r_squared:.4f}"
    )
    return 0


def cmd_report(args) -> int:
    run = read_metrics(os.path.join(args.run, "metrics.txt"))
    k = run.get("k", "20")
    hr_key, ndcg_key = f"hr@{k}", f"ndcg@{k}"
    print(f"{'run':<24} {'HR@' + k:>12} {'NDCG@' + k:>12}")
    if args.baseline:
        base = read_metrics(os.path.join(args.baseline, "metrics.txt"))
        print(f"{base.get('variant', args.baseline):<24} {float(base[hr_key]):12.5f} {float(base[ndcg_key]):12.5f}")
    print(f"{run.get('variant', args.run):<24} {float(run[hr_key]):12.5f} {float(run[ndcg_key]):12.5f}")
    if args.baseline:
        imp = compute_improvement(
            float(base[hr_key]), float(base[ndcg_key]), float(run[hr_key]), float(run[ndcg_key])
        )
        print(f"Imp. {imp:+.2f}%")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mltfr",
        description="Sequential recommendation with filtered LLM-vocabulary experts.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="core-filter and re-index an interaction dataset")
    _add_common(p)
    p.set_defaults(fn=cmd_prepare_data)

    p = sub.add_parser("train", help="train one variant and write artifacts")
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a saved checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("ablate", help="train full and wo_sc under shared seeds")
    _add_common(p)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("sweep-experts", help="re-train across expert counts")
    _add_common(p)
    p.add_argument("--max-experts", type=int, default=6)
    p.set_defaults(fn=cmd_sweep_experts)

    p = sub.add_parser("bench-moe", help="time the gated expert forward pass")
    _add_common(p, config_required=False)
    p.add_argument("--max-experts", type=int, default=6)
    p.add_argument("--repetitions", type=int, default=5)
    p.set_defaults(fn=cmd_bench_moe)

    p = sub.add_parser("report", help="print metrics tables and improvements")
    p.add_argument("--run", required=True, help="directory containing metrics.txt")
    p.add_argument("--baseline", default=None, help="baseline directory for Imp.")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (MltfrError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
