"""Training loop: batch assembly, joint objective, optimizer, early stopping.

One training step draws (t, eps) per sample, noises the positive target
embedding and the in-batch negative centroid with the same draw, denoises
both under the same (possibly unconditional) condition, and blends the
reconstruction, contrastive, and next-time losses into one backward pass.
"""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch

from .config import LossConfig, RunConfig, TrainConfig
from .data import SequenceSample, SplitBundle
from .diffusion import DiffusionSchedule, q_sample
from .evaluator import MetricsReport, evaluate
from .losses import (
    LossBreakdown,
    centroid_from_indices,
    combine,
    loss_bpr,
    loss_normal,
    sample_negative_indices,
    toi_loss,
)
from .model import RecModel
from .optim import AdamW

logger = logging.getLogger(__name__)


class NumericFailure(RuntimeError):
    """Non-finite loss; carries a diagnostic dump of the offending batch."""

    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


def batch_to_tensors(samples: Sequence[SequenceSample], dtype: torch.dtype) -> dict:
    return {
        "items": torch.tensor([s.history_items for s in samples], dtype=torch.long),
        "times": torch.tensor([s.history_times for s in samples], dtype=dtype),
        "mask": torch.tensor([s.history_mask for s in samples], dtype=torch.bool),
        "target": torch.tensor([s.target_item for s in samples], dtype=torch.long),
        "target_time": torch.tensor([s.target_time for s in samples], dtype=dtype),
    }


@dataclass
class StepDraws:
    """All randomness of one training step, drawn up front for reproducibility."""

    t: torch.Tensor          # (B,) long in [1, T]
    epsilon: torch.Tensor    # (B, d)
    neg_indices: Optional[torch.Tensor]  # (B, k) long, None when B < 2
    uncond: torch.Tensor     # (B,) bool, condition replaced by the learned token


def draw_step(
    batch_size: int,
    d: int,
    T: int,
    k: int,
    p_uncond: float,
    generator: torch.Generator,
    dtype: torch.dtype,
) -> StepDraws:
    t = torch.randint(1, T + 1, (batch_size,), generator=generator)
    epsilon = torch.randn(batch_size, d, generator=generator, dtype=dtype)
    neg = sample_negative_indices(batch_size, k, generator) if batch_size >= 2 else None
    uncond = torch.rand(batch_size, generator=generator, dtype=dtype) < p_uncond
    return StepDraws(t, epsilon, neg, uncond)


def step_loss(
    model: RecModel,
    batch: dict,
    draws: StepDraws,
    schedule: DiffusionSchedule,
    loss_cfg: LossConfig,
) -> tuple:
    """Forward pass to the blended loss tensor; returns (loss, LossBreakdown)."""
    state = model.user_state(batch["items"], batch["times"], batch["mask"])
    condition = state.g_prime
    if draws.uncond.any():
        condition = torch.where(
            draws.uncond.unsqueeze(-1), model.uncond_token.unsqueeze(0), condition
        )

    e0_pos = model.item_emb(batch["target"])
    noised_pos = q_sample(e0_pos, draws.t, schedule, epsilon=draws.epsilon)
    e0_hat_pos = model.denoise(noised_pos.e_t, draws.t, condition)
    l_normal = loss_normal(e0_hat_pos, e0_pos)

    degenerate = 0
    if draws.neg_indices is not None:
        e0_neg = centroid_from_indices(e0_pos, draws.neg_indices)
        noised_neg = q_sample(e0_neg, draws.t, schedule, epsilon=draws.epsilon)
        e0_hat_neg = model.denoise(noised_neg.e_t, draws.t, condition)
        l_bpr, degenerate = loss_bpr(
            e0_hat_pos, e0_pos, e0_hat_neg, e0_neg, loss_cfg.k, loss_cfg.sign_mode
        )
    else:
        logger.warning("batch of 1 sample has no in-batch negatives; bpr term is 0")
        l_bpr = torch.zeros((), dtype=e0_pos.dtype)
        degenerate += 1

    eta = loss_cfg.eta
    if model.toi_cfg.enabled:
        tau_true = model.encode_target_time(batch["target_time"])
        l_toi, deg_toi = toi_loss(state.tau_hat, tau_true)
        degenerate += deg_toi
    else:
        l_toi = torch.zeros((), dtype=e0_pos.dtype)
        eta = 1.0  # no next-time head to supervise
    return combine(l_normal, l_bpr, l_toi, loss_cfg.lambda_, eta, degenerate)


def train_step(
    model: RecModel,
    batch: dict,
    draws: StepDraws,
    schedule: DiffusionSchedule,
    loss_cfg: LossConfig,
    optimizer: torch.optim.Optimizer,
    grad_clip: float = 0.0,
) -> LossBreakdown:
    model.train()
    optimizer.zero_grad(set_to_none=True)
    loss, breakdown = step_loss(model, batch, draws, schedule, loss_cfg)
    if not torch.isfinite(loss):
        dump = {
            "breakdown": breakdown.as_dict(),
            "t": draws.t.tolist(),
            "targets": batch["target"].tolist(),
        }
        raise NumericFailure(f"non-finite loss {float(loss.detach())}", dump)
    loss.backward()
    if grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()
    return breakdown


@dataclass
class TrainOutcome:
    best_state: dict
    best_metric: float
    best_epoch: int
    epochs_run: int
    validations: int
    stopped_early: bool
    log: list = field(default_factory=list)


def fit(
    model: RecModel,
    bundle: SplitBundle,
    cfg: RunConfig,
    schedule: DiffusionSchedule,
    log_path: Optional[str] = None,
) -> TrainOutcome:
    """Epoch loop with per-epoch validation and patience-based early stopping.

    Keeps the state dict of the best validation metric seen; stops once the
    metric has not improved for `patience` consecutive validations.
    """
    if not bundle.valid:
        raise ValueError("validation split is empty")
    train_cfg = cfg.train
    torch.manual_seed(train_cfg.seed)  # covers any dropout randomness
    gen = torch.Generator().manual_seed(train_cfg.seed)
    optimizer = AdamW(
        model.parameters(), lr=train_cfg.learning_rate, weight_decay=train_cfg.weight_decay
    )
    best_metric = float("-inf")
    best_state = copy.deepcopy(model.state_dict())
    best_epoch = 0
    since_improvement = 0
    validations = 0
    stopped_early = False
    log_rows: list = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    header = (
        "epoch\tl_normal\tl_bpr\tl_toi\tl_total\tval_hr5\tval_hr10\t"
        "val_ndcg5\tval_ndcg10\twall_s"
    )
    if log_fh:
        log_fh.write(header + "\n")
    try:
        for epoch in range(1, train_cfg.max_epochs + 1):
            t0 = time.perf_counter()
            order = torch.randperm(len(bundle.train), generator=gen).tolist()
            sums = {"l_normal": 0.0, "l_bpr": 0.0, "l_toi": 0.0, "l_total": 0.0}
            n_batches = 0
            for lo in range(0, len(order), train_cfg.batch_size_train):
                chunk = [bundle.train[i] for i in order[lo : lo + train_cfg.batch_size_train]]
                batch = batch_to_tensors(chunk, model.dtype)
                draws = draw_step(
                    len(chunk),
                    model.model_cfg.d,
                    schedule.T,
                    cfg.loss.k,
                    cfg.diffusion.p_uncond,
                    gen,
                    model.dtype,
                )
                breakdown = train_step(
                    model, batch, draws, schedule, cfg.loss, optimizer, train_cfg.grad_clip
                )
                for key in sums:
                    sums[key] += getattr(breakdown, key)
                n_batches += 1
            report = evaluate(
                model,
                bundle.valid,
                schedule,
                cfg.diffusion,
                cfg.eval,
                batch_size=train_cfg.batch_size_eval,
            )
            validations += 1
            metric = report.metric(train_cfg.val_metric)
            wall = time.perf_counter() - t0
            row = {
                "epoch": epoch,
                **{key: sums[key] / max(n_batches, 1) for key in sums},
                "val_hr5": report.hr.get(5, float("nan")),
                "val_hr10": report.hr.get(10, float("nan")),
                "val_ndcg5": report.ndcg.get(5, float("nan")),
                "val_ndcg10": report.ndcg.get(10, float("nan")),
                "wall_s": wall,
            }
            log_rows.append(row)
            if log_fh:
                log_fh.write(
                    f"{epoch}\t{row['l_normal']:.6f}\t{row['l_bpr']:.6f}\t{row['l_toi']:.6f}"
                    f"\t{row['l_total']:.6f}\t{row['val_hr5']:.6f}\t{row['val_hr10']:.6f}"
                    f"\t{row['val_ndcg5']:.6f}\t{row['val_ndcg10']:.6f}\t{wall:.3f}\n"
                )
                log_fh.flush()
            if metric > best_metric:
                best_metric = metric
                best_state = copy.deepcopy(model.state_dict())
                best_epoch = epoch
                since_improvement = 0
            else:
                since_improvement += 1
                if since_improvement >= train_cfg.patience:
                    stopped_early = True
                    break
    finally:
        if log_fh:
            log_fh.close()
    model.load_state_dict(best_state)
    return TrainOutcome(
        best_state=best_state,
        best_metric=best_metric,
        best_epoch=best_epoch,
        epochs_run=len(log_rows),
        validations=validations,
        stopped_early=stopped_early,
        log=log_rows,
    )


# --- finite-difference gradient verification ---------------------------------


def fd_gradient(closure, tensor: torch.Tensor, step: float = 1e-5) -> torch.Tensor:
    """Central-difference gradient of a scalar closure w.r.t. one tensor."""
    out = torch.zeros_like(tensor)
    flat = tensor.view(-1)
    out_flat = out.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            original = flat[i].item()
            flat[i] = original + step
            up = float(closure())
            flat[i] = original - step
            down = float(closure())
            flat[i] = original
            out_flat[i] = (up - down) / (2.0 * step)
    return out


def max_relative_error(a: torch.Tensor, b: torch.Tensor, zero_guard: float = 1e-10) -> float:
    """Worst coordinate-wise |a-b| / max(|a|,|b|); both-small coordinates count as 0."""
    scale = torch.maximum(a.abs(), b.abs())
    live = scale >= zero_guard
    if not live.any():
        return 0.0
    return float(((a - b).abs()[live] / scale[live]).max())


def grad_check(
    model: RecModel,
    batch: dict,
    draws: StepDraws,
    schedule: DiffusionSchedule,
    loss_cfg: LossConfig,
    fd_step: float = 1e-5,
    zero_guard: float = 1e-10,
) -> dict:
    """Central finite differences vs autograd for every parameter coordinate.

    Returns {parameter name: max relative error}. The loss closure reuses the
    fixed draws, so it is a pure deterministic function of the parameters.
    Coordinates where both gradients are below `zero_guard` count as 0 error.
    Requires float64 parameters.
    """
    if model.dtype != torch.float64:
        raise ValueError("gradient checking requires a float64 model")
    model.eval()

    def closure() -> torch.Tensor:
        loss, _ = step_loss(model, batch, draws, schedule, loss_cfg)
        return loss

    model.zero_grad(set_to_none=True)
    loss = closure()
    loss.backward()
    analytic = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in model.named_parameters()
    }

    errors: dict[str, float] = {}
    for name, p in model.named_parameters():
        fd = fd_gradient(closure, p, fd_step)
        errors[name] = max_relative_error(fd, analytic[name], zero_guard)
    return errors


def grad_check_groups(errors: dict) -> dict:
    """Aggregate per-parameter errors by top-level module name."""
    groups: dict[str, float] = {}
    for name, err in errors.items():
        group = name.split(".")[0]
        groups[group] = max(groups.get(group, 0.0), err)
    return groups
