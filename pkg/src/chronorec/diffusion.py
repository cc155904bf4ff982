"""Variance schedule, forward noising, and the deterministic reverse sampler.

Step indices are 1-based: t runs over [1, T], and alpha_bar at t = 0 is
defined as 1 so the terminal reverse step reproduces the clean embedding
exactly. Schedule tables are kept in float64 and cast at the point of use.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import torch
from torch import Tensor


@dataclass(frozen=True)
class DiffusionSchedule:
    """beta/alpha/alpha_bar tables over t in [1, T] (stored 0-indexed)."""

    T: int
    beta: Tensor
    alpha: Tensor
    alpha_bar: Tensor

    def alpha_bar_at(self, t) -> Tensor:
        """alpha_bar for integer or tensor t in [0, T], with alpha_bar(0) = 1."""
        t = torch.as_tensor(t, dtype=torch.long)
        table = torch.cat(
            [torch.ones(1, dtype=self.alpha_bar.dtype), self.alpha_bar]
        )
        return table[t]


class NoisedTarget(NamedTuple):
    e_t: Tensor
    epsilon: Tensor
    t: Tensor


def build_schedule(
    T: int,
    kind: str = "linear",
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
) -> DiffusionSchedule:
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    if T == 1:
        beta = torch.tensor([beta_start], dtype=torch.float64)
    else:
        beta = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alpha = 1.0 - beta
    alpha_bar = torch.cumprod(alpha, dim=0)
    return DiffusionSchedule(T, beta, alpha, alpha_bar)


def q_sample(
    e0: Tensor,
    t,
    schedule: DiffusionSchedule,
    epsilon: Optional[Tensor] = None,
    generator: Optional[torch.Generator] = None,
) -> NoisedTarget:
    """e_t = sqrt(abar_t) * e0 + sqrt(1 - abar_t) * eps, eps ~ N(0, I) if absent."""
    t = torch.as_tensor(t, dtype=torch.long)
    if torch.any(t < 1) or torch.any(t > schedule.T):
        raise ValueError("t must lie in [1, T]")
    if epsilon is None:
        epsilon = torch.randn(e0.shape, generator=generator, dtype=e0.dtype)
    abar = schedule.alpha_bar_at(t).to(e0.dtype)
    while abar.dim() < e0.dim():
        abar = abar.unsqueeze(-1)
    e_t = torch.sqrt(abar) * e0 + torch.sqrt(1.0 - abar) * epsilon
    return NoisedTarget(e_t, epsilon, t)


def implied_noise(e_t: Tensor, e0: Tensor, t, schedule: DiffusionSchedule) -> Tensor:
    """eps = (e_t - sqrt(abar_t) e0) / sqrt(1 - abar_t)."""
    abar = schedule.alpha_bar_at(torch.as_tensor(t, dtype=torch.long)).to(e_t.dtype)
    while abar.dim() < e_t.dim():
        abar = abar.unsqueeze(-1)
    denom = torch.sqrt(1.0 - abar)
    if torch.any(denom == 0):
        raise ValueError("alpha_bar = 1 at t >= 1; schedule must forbid beta = 0")
    return (e_t - torch.sqrt(abar) * e0) / denom


def ddim_step(
    e_t: Tensor,
    e0_hat: Tensor,
    t,
    schedule: DiffusionSchedule,
    t_prev=None,
) -> Tensor:
    """Deterministic reverse step t -> t_prev (default t-1) via the implied noise."""
    t = torch.as_tensor(t, dtype=torch.long)
    t_prev = t - 1 if t_prev is None else torch.as_tensor(t_prev, dtype=torch.long)
    eps_hat = implied_noise(e_t, e0_hat, t, schedule)
    abar_prev = schedule.alpha_bar_at(t_prev).to(e_t.dtype)
    while abar_prev.dim() < e_t.dim():
        abar_prev = abar_prev.unsqueeze(-1)
    return torch.sqrt(abar_prev) * e0_hat + torch.sqrt(1.0 - abar_prev) * eps_hat


def ddim_timesteps(T: int, steps: int) -> list:
    """Descending inference subset of [1, T] on a uniform stride, endpoints kept."""
    steps = min(steps, T)
    if steps == 1:
        return [T]
    raw = torch.linspace(T, 1, steps, dtype=torch.float64)
    seen = []
    for value in raw.round().long().tolist():
        if not seen or value < seen[-1]:
            seen.append(value)
    return seen


def initial_noise(
    n: int, d: int, seed: int, dtype: torch.dtype = torch.float64
) -> Tensor:
    """Per-sample seeded N(0, I) draws: row i depends only on (seed, i).

    Sharding a batch across workers therefore reproduces the serial noise.
    """
    out = torch.empty(n, d, dtype=dtype)
    for i in range(n):
        gen = torch.Generator().manual_seed(int(seed) * 1_000_003 + i)
        out[i] = torch.randn(d, generator=gen, dtype=dtype)
    return out


@torch.no_grad()
def sample(
    model,
    condition: Tensor,
    schedule: DiffusionSchedule,
    steps: int,
    w: float,
    seed: int = 0,
    noise: Optional[Tensor] = None,
) -> Tensor:
    """Run the guided reverse chain from pure noise to a predicted embedding.

    The chain never sees a target item: its only inputs are the conditioning
    vector, the schedule, and seeded noise. Deterministic given (seed, inputs).
    """
    B, d = condition.shape
    e = initial_noise(B, d, seed, condition.dtype) if noise is None else noise.clone()
    timesteps = ddim_timesteps(schedule.T, steps)
    for i, t in enumerate(timesteps):
        t_prev = timesteps[i + 1] if i + 1 < len(timesteps) else 0
        t_batch = torch.full((B,), t, dtype=torch.long)
        e0_hat = model.guided_denoise(e, t_batch, condition, w)
        e = ddim_step(e, e0_hat, t_batch, schedule, torch.full((B,), t_prev, dtype=torch.long))
    return e
