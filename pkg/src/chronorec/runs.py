"""End-to-end run orchestration shared by the command-line tool and tests:
train/evaluate runs with self-reproducing run directories, the encoder
ablation (position baseline, time encoding, time encoding + next-time head),
and the gamma/eta grid sweep.
"""

from __future__ import annotations

import copy
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import torch

from . import config as config_mod
from .config import RunConfig
from .data import SplitBundle, Vocab, load_snapshot
from .diffusion import DiffusionSchedule, build_schedule
from .evaluator import MetricsReport, evaluate, save_report
from .model import RecModel, load_checkpoint, save_checkpoint
from .trainer import TrainOutcome, fit

ABLATION_VARIANTS = ("base", "te", "te_tp")


def build_model(cfg: RunConfig, vocab_size: int, max_len: int) -> RecModel:
    return RecModel(cfg.model, cfg.time_encoder, cfg.toi, vocab_size, max_len)


def build_run_schedule(cfg: RunConfig) -> DiffusionSchedule:
    return build_schedule(
        cfg.diffusion.T, "linear", cfg.diffusion.beta_start, cfg.diffusion.beta_end
    )


def apply_variant(cfg: RunConfig, variant: str, time_kind: str = "gaussian") -> RunConfig:
    """Ablation rows: base = learned positions, te = real-time encoding,
    te_tp = time encoding plus the next-time prediction head."""
    out = copy.deepcopy(cfg)
    if variant == "base":
        out.time_encoder.kind = "position"
        out.toi.enabled = False
    elif variant == "te":
        out.time_encoder.kind = time_kind
        out.toi.enabled = False
    elif variant == "te_tp":
        out.time_encoder.kind = time_kind
        out.toi.enabled = True
    else:
        raise ValueError(f"unknown ablation variant {variant!r}")
    return out.validate()


def train_run(
    cfg: RunConfig,
    bundle: SplitBundle,
    vocab: Vocab,
    run_dir: Optional[str] = None,
    snapshot_path: Optional[str] = None,
) -> tuple:
    """Train from a prepared bundle; returns (model, TrainOutcome).

    When run_dir is given, echoes the resolved config and seeds, appends the
    per-epoch log, and saves the best checkpoint, so the directory reproduces
    the run byte-for-byte.
    """
    max_len = len(bundle.all_samples()[0].history_items)
    model = build_model(cfg, vocab.size, max_len)
    schedule = build_run_schedule(cfg)
    log_path = None
    if run_dir:
        os.makedirs(run_dir, exist_ok=True)
        if snapshot_path:
            cfg.data.input = snapshot_path
        config_mod.save_resolved(cfg, os.path.join(run_dir, "resolved_config.json"))
        log_path = os.path.join(run_dir, "train_log.tsv")
    outcome = fit(model, bundle, cfg, schedule, log_path=log_path)
    if run_dir:
        save_checkpoint(
            os.path.join(run_dir, "checkpoint.pt"),
            model,
            extra={
                "vocab_sha256": vocab.sha256(),
                "best_epoch": outcome.best_epoch,
                "best_metric": outcome.best_metric,
                "seeds": {
                    "data": cfg.data.seed,
                    "init": cfg.model.init_seed,
                    "sampler": cfg.train.seed,
                    "eval": cfg.eval.seed,
                },
            },
        )
    return model, outcome


def evaluate_run(
    cfg: RunConfig,
    model: RecModel,
    samples,
    run_dir: Optional[str] = None,
) -> MetricsReport:
    schedule = build_run_schedule(cfg)
    report = evaluate(
        model, samples, schedule, cfg.diffusion, cfg.eval, batch_size=cfg.train.batch_size_eval
    )
    if run_dir:
        os.makedirs(run_dir, exist_ok=True)
        save_report(
            report,
            os.path.join(run_dir, "metrics.txt"),
            os.path.join(run_dir, "toi_histogram.tsv"),
        )
    return report


def evaluate_checkpoint(
    cfg: RunConfig,
    checkpoint_path: str,
    snapshot_path: str,
    part: str = "test",
    run_dir: Optional[str] = None,
) -> MetricsReport:
    bundle, vocab, _, _ = load_snapshot(snapshot_path)
    model, extra = load_checkpoint(checkpoint_path)
    stored = extra.get("vocab_sha256")
    if stored and stored != vocab.sha256():
        raise ValueError("checkpoint was trained on a different vocabulary")
    samples = getattr(bundle, part)
    return evaluate_run(cfg, model, samples, run_dir)


# --- gamma/eta sweep ----------------------------------------------------------


def _sweep_cell(args: tuple) -> dict:
    """One (gamma, eta) grid cell; module-level so process pools can pickle it."""
    cfg_dict, snapshot_path, gamma, eta = args
    torch.set_num_threads(1)  # identical kernels whether sharded or sequential
    cfg = config_mod.from_dict(cfg_dict)
    cfg.toi.gamma = gamma
    cfg.loss.eta = eta
    cfg.validate()
    bundle, vocab, _, _ = load_snapshot(snapshot_path)
    model, outcome = train_run(cfg, bundle, vocab)
    report = evaluate_run(cfg, model, bundle.test)
    row = {
        "gamma": gamma,
        "eta": eta,
        "best_epoch": outcome.best_epoch,
        "val_metric": outcome.best_metric,
    }
    for k in sorted(report.hr):
        row[f"hr@{k}"] = report.hr[k]
    for k in sorted(report.ndcg):
        row[f"ndcg@{k}"] = report.ndcg[k]
    return row


def sweep(
    cfg: RunConfig,
    snapshot_path: str,
    gammas: Sequence[float],
    etas: Sequence[float],
    parallel: int = 1,
    run_dir: Optional[str] = None,
) -> list:
    """Cartesian (gamma, eta) grid with a shared data seed; rows in grid order."""
    for value in list(gammas) + list(etas):
        if not 0.0 <= value <= 1.0:
            raise config_mod.ConfigError("sweep grid values must lie in [0, 1]")
    cfg_dict = config_mod.to_dict(cfg)
    cells = [(cfg_dict, snapshot_path, g, e) for g in gammas for e in etas]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            rows = list(pool.map(_sweep_cell, cells))
    else:
        rows = [_sweep_cell(cell) for cell in cells]
    if run_dir:
        os.makedirs(run_dir, exist_ok=True)
        write_table(os.path.join(run_dir, "sweep.tsv"), rows)
    return rows


def write_table(path: str, rows: Sequence[dict]) -> None:
    keys: list[str] = []
    for row in rows:
        for key in row:
            if key not in keys:
                keys.append(key)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(keys) + "\n")
        for row in rows:
            cells = []
            for key in keys:
                value = row.get(key, "")
                cells.append(f"{value:.6f}" if isinstance(value, float) else str(value))
            fh.write("\t".join(cells) + "\n")


# --- encoder ablation ----------------------------------------------------------


def run_ablation(
    cfg: RunConfig,
    bundle: SplitBundle,
    vocab: Vocab,
    variants: Sequence[str] = ABLATION_VARIANTS,
    time_kind: str = "gaussian",
    run_dir: Optional[str] = None,
) -> list:
    """Train and test each encoder variant on the same prepared data."""
    rows = []
    for variant in variants:
        vcfg = apply_variant(cfg, variant, time_kind)
        model, outcome = train_run(vcfg, bundle, vocab)
        report = evaluate_run(vcfg, model, bundle.test)
        row = {"variant": variant, "best_epoch": outcome.best_epoch}
        for k in sorted(report.hr):
            row[f"hr@{k}"] = report.hr[k]
        for k in sorted(report.ndcg):
            row[f"ndcg@{k}"] = report.ndcg[k]
        if report.toi_cosine:
            ordered = sorted(report.toi_cosine)
            row["toi_cosine_median"] = ordered[len(ordered) // 2]
        rows.append(row)
    if run_dir:
        os.makedirs(run_dir, exist_ok=True)
        write_table(os.path.join(run_dir, "ablation.tsv"), rows)
    return rows
