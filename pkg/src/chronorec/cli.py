"""Command-line entry point.

Subcommands: prepare, synth, train, evaluate, ablate, sweep, gradcheck.
Settings resolve as config file < CHRONOREC_* environment variables < dotted
flags (for example ``--loss.lambda 0.4 --diffusion.T 500``). Exit codes:
0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import config as config_mod
from .config import ConfigError, RunConfig
from .data import (
    DataError,
    load_events,
    load_snapshot,
    prepare_dataset,
    save_snapshot,
)
from .trainer import NumericFailure

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file", default=None)
    for key in config_mod.config_keys():
        parser.add_argument(f"--{key}", dest=f"cfgkey::{key}", metavar="V", default=None)


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides = []
    for name, value in vars(args).items():
        if name.startswith("cfgkey::") and value is not None:
            overrides.append((name.split("::", 1)[1], value))
    return config_mod.resolve(args.config, overrides)


def _floats(text: str) -> list:
    return [float(p) for p in text.replace(",", " ").split() if p]


def cmd_prepare(args) -> int:
    cfg = _resolve_config(args)
    if args.input:
        cfg.data.input = args.input
    if not cfg.data.input:
        raise ConfigError("prepare needs --input or data.input")
    result = load_events(
        cfg.data.input,
        format=cfg.data.format,
        header=cfg.data.header,
        user_col=cfg.data.user_col,
        item_col=cfg.data.item_col,
        time_col=cfg.data.time_col,
        strict=cfg.data.strict,
    )
    split_kind = "loo" if cfg.data.split == "loo" else "temporal"
    bundle, vocab, stats = prepare_dataset(
        list(result.events), cfg.data.min_count, cfg.data.max_len, split_kind, cfg.data.seed
    )
    meta = {
        "source": cfg.data.input,
        "rows_read": result.rows_read,
        "rows_skipped": result.rows_skipped,
        "min_count": cfg.data.min_count,
        "max_len": cfg.data.max_len,
        "seed": cfg.data.seed,
    }
    save_snapshot(args.out, bundle, vocab, stats, meta)
    print(f"snapshot written to {args.out}")
    for key, value in stats.items():
        print(f"{key}\t{value}")
    print(f"split sizes\ttrain={len(bundle.train)}\tvalid={len(bundle.valid)}\ttest={len(bundle.test)}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synth import SynthSpec, gap_benchmark_spec, generate

    if args.spec:
        with open(args.spec, "r", encoding="utf-8") as fh:
            spec = SynthSpec.from_json(fh.read())
    else:
        spec = gap_benchmark_spec(user_count=args.users, catalog_size=args.items, seed=args.seed)
    events = generate(spec)
    with open(args.out, "w", encoding="utf-8") as fh:
        for ev in events:
            fh.write(f"{ev.user_id},{ev.item_id},{ev.timestamp}\n")
    spec_path = args.out + ".spec.json"
    with open(spec_path, "w", encoding="utf-8") as fh:
        fh.write(spec.to_json() + "\n")
    print(f"wrote {len(events)} events to {args.out} (law in {spec_path})")
    return EXIT_OK


def cmd_train(args) -> int:
    from .runs import evaluate_run, train_run

    cfg = _resolve_config(args)
    bundle, vocab, stats, _ = load_snapshot(args.snapshot)
    model, outcome = train_run(cfg, bundle, vocab, run_dir=args.run_dir, snapshot_path=args.snapshot)
    print(
        f"trained {stats['sequences']} users / {stats['items']} items: "
        f"best {cfg.train.val_metric}={outcome.best_metric:.6f} at epoch {outcome.best_epoch} "
        f"({outcome.epochs_run} epochs run)"
    )
    if args.eval_after:
        report = evaluate_run(cfg, model, bundle.test, run_dir=args.run_dir)
        print(report.to_text(), end="")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .runs import evaluate_checkpoint

    cfg = _resolve_config(args)
    report = evaluate_checkpoint(cfg, args.checkpoint, args.snapshot, args.part, args.run_dir)
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .runs import run_ablation

    cfg = _resolve_config(args)
    bundle, vocab, _, _ = load_snapshot(args.snapshot)
    rows = run_ablation(cfg, bundle, vocab, time_kind=args.time_kind, run_dir=args.run_dir)
    for row in rows:
        print("\t".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .runs import sweep

    cfg = _resolve_config(args)
    rows = sweep(
        cfg,
        args.snapshot,
        _floats(args.gammas),
        _floats(args.etas),
        parallel=args.parallel,
        run_dir=args.run_dir,
    )
    for row in rows:
        print("\t".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradprobe import run_grad_probe

    report = run_grad_probe(d=args.d, T=args.T, layers=args.layers, batch=args.batch)
    worst = 0.0
    for group, err in sorted(report.items()):
        print(f"{group}\t{err:.3e}")
        worst = max(worst, err)
    print(f"max_relative_error\t{worst:.3e}")
    if worst > args.tolerance:
        print(f"FAIL: exceeds tolerance {args.tolerance:g}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"PASS: within tolerance {args.tolerance:g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chronorec", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="ingest a log and write a split snapshot")
    p.add_argument("--input", default=None)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("synth", help="generate a synthetic interaction log")
    p.add_argument("--out", required=True)
    p.add_argument("--spec", default=None, help="JSON law file; default benchmark law")
    p.add_argument("--users", type=int, default=500)
    p.add_argument("--items", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a prepared snapshot")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--run-dir", default=None)
    p.add_argument("--eval-after", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a snapshot part")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--part", choices=("train", "valid", "test"), default="test")
    p.add_argument("--run-dir", default=None)
    _add_config_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="position vs time encoding vs +next-time head")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--time-kind", default="gaussian", choices=("sinusoidal", "gaussian", "rff"))
    p.add_argument("--run-dir", default=None)
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="gamma x eta grid of train+evaluate runs")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--gammas", required=True)
    p.add_argument("--etas", required=True)
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--run-dir", default=None)
    _add_config_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference check of the joint loss")
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--T", type=int, default=4)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        print(json.dumps(exc.dump, indent=2), file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as exc:  # missing snapshot/checkpoint, bad artifact
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
