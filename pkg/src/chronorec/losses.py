"""Training objective pieces and their blended total.

l_ioi   = lambda * l_normal + (1 - lambda) * l_bpr
l_total = eta * l_ioi + (1 - eta) * l_toi

l_normal is the squared reconstruction error of the denoised positive target;
l_bpr contrasts the denoised positive against the denoised centroid of k
in-batch negatives; l_toi is the negated cosine between predicted and true
next-time embeddings. Zero-norm cosine inputs contribute 0 and are counted.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import Tensor
import torch.nn.functional as F

logger = logging.getLogger(__name__)

ZERO_NORM_EPS = 1e-12


@dataclass
class LossBreakdown:
    l_normal: float
    l_bpr: float
    l_toi: float
    l_ioi: float
    l_total: float
    degenerate_count: int = 0

    def as_dict(self) -> dict:
        return {
            "l_normal": self.l_normal,
            "l_bpr": self.l_bpr,
            "l_toi": self.l_toi,
            "l_ioi": self.l_ioi,
            "l_total": self.l_total,
            "degenerate_count": self.degenerate_count,
        }


def loss_normal(e0_hat: Tensor, e0: Tensor) -> Tensor:
    """Mean over the batch of the squared Euclidean distance per sample."""
    if e0_hat.shape != e0.shape:
        raise ValueError("shape mismatch in reconstruction loss")
    return ((e0_hat - e0) ** 2).sum(dim=-1).mean()


def guarded_cosine(a: Tensor, b: Tensor) -> tuple:
    """Cosine similarity rows with zero-norm rows forced to 0; returns (sim, degenerate)."""
    na = a.norm(dim=-1)
    nb = b.norm(dim=-1)
    degenerate = (na < ZERO_NORM_EPS) | (nb < ZERO_NORM_EPS)
    denom = (na * nb).clamp_min(ZERO_NORM_EPS)
    sim = (a * b).sum(dim=-1) / denom
    sim = torch.where(degenerate, torch.zeros_like(sim), sim)
    return sim, degenerate


def sample_negative_indices(
    batch_size: int, k: int, generator: Optional[torch.Generator] = None
) -> Tensor:
    """(B, k_eff) in-batch indices, uniform without replacement, self excluded.

    k is clamped to batch_size - 1 with a warning when the batch is too small.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    avail = batch_size - 1
    if avail < 1:
        raise ValueError("need at least 2 samples in the batch to draw negatives")
    k_eff = min(k, avail)
    if k_eff < k:
        logger.warning("batch of %d too small for k=%d negatives; clamping to %d", batch_size, k, k_eff)
    rows = []
    for i in range(batch_size):
        perm = torch.randperm(avail, generator=generator)[:k_eff]
        rows.append(torch.where(perm >= i, perm + 1, perm))
    return torch.stack(rows)


def negative_centroid(
    batch_targets: Tensor,
    positive_index: int,
    k: int,
    generator: Optional[torch.Generator] = None,
) -> Tensor:
    """Mean of k uniformly sampled other rows of the batch target matrix."""
    B = batch_targets.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    k_eff = min(k, B - 1)
    if k_eff < k:
        logger.warning("batch of %d too small for k=%d negatives; clamping to %d", B, k, k_eff)
    if k_eff < 1:
        raise ValueError("need at least 2 samples in the batch to draw negatives")
    perm = torch.randperm(B - 1, generator=generator)[:k_eff]
    idx = torch.where(perm >= positive_index, perm + 1, perm)
    return batch_targets[idx].mean(dim=0)


def centroid_from_indices(batch_targets: Tensor, indices: Tensor) -> Tensor:
    """(B, k) index matrix -> (B, d) centroid rows."""
    return batch_targets[indices].mean(dim=1)


def loss_bpr(
    e0_hat_pos: Tensor,
    e0_pos: Tensor,
    e0_hat_neg: Tensor,
    e0_neg: Tensor,
    k: int,
    sign_mode: str = "paper-intent",
) -> tuple:
    """Centroid-contrastive ranking loss; returns (scalar loss, degenerate count).

    paper-intent: -log sigmoid(+k * [S(pos) - S(neg)]), rewarding positive
    similarity. verbatim keeps the opposite printed sign and is retained for
    comparison only.
    """
    if sign_mode not in ("paper-intent", "verbatim"):
        raise ValueError(f"unknown sign_mode {sign_mode!r}")
    s_pos, deg_pos = guarded_cosine(e0_hat_pos, e0_pos)
    s_neg, deg_neg = guarded_cosine(e0_hat_neg, e0_neg)
    margin = k * (s_pos - s_neg)
    if sign_mode == "verbatim":
        margin = -margin
    per_sample = F.softplus(-margin)  # -log sigmoid(margin)
    degenerate = deg_pos | deg_neg
    per_sample = torch.where(degenerate, torch.zeros_like(per_sample), per_sample)
    return per_sample.mean(), int(degenerate.sum().item())


def toi_loss(tau_hat: Tensor, tau_true: Tensor) -> tuple:
    """Negated cosine similarity, batch mean; zero-norm rows contribute 0."""
    sim, degenerate = guarded_cosine(tau_true, tau_hat)
    return (-sim).mean(), int(degenerate.sum().item())


def combine(l_normal, l_bpr, l_toi, lambda_: float, eta: float, degenerate_count: int = 0):
    """Blend the three components; returns (total tensor, LossBreakdown)."""
    if not 0.0 <= lambda_ <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta must lie in [0, 1]")
    l_normal = torch.as_tensor(l_normal, dtype=torch.float64) if not torch.is_tensor(l_normal) else l_normal
    l_bpr = torch.as_tensor(l_bpr, dtype=l_normal.dtype) if not torch.is_tensor(l_bpr) else l_bpr
    l_toi = torch.as_tensor(l_toi, dtype=l_normal.dtype) if not torch.is_tensor(l_toi) else l_toi
    l_ioi = lambda_ * l_normal + (1.0 - lambda_) * l_bpr
    l_total = eta * l_ioi + (1.0 - eta) * l_toi
    breakdown = LossBreakdown(
        l_normal=float(l_normal.detach()),
        l_bpr=float(l_bpr.detach()),
        l_toi=float(l_toi.detach()),
        l_ioi=float(l_ioi.detach()),
        l_total=float(l_total.detach()),
        degenerate_count=degenerate_count,
    )
    return l_total, breakdown
