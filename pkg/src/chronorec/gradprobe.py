"""Canonical tiny-model probe for finite-difference gradient verification.

Builds a float64 model on a handful of crafted samples, freezes one set of
step draws (with a raised unconditional rate so the guidance token is
exercised), and sweeps every parameter coordinate.
"""

from __future__ import annotations

import torch

from .config import LossConfig, ModelConfig, TimeEncoderConfig, ToiConfig
from .data import SequenceSample
from .diffusion import build_schedule
from .model import RecModel
from .trainer import batch_to_tensors, draw_step, grad_check, grad_check_groups


def probe_samples(batch: int, max_len: int = 5, vocab_size: int = 11) -> list:
    """Deterministic toy histories with increasing times and varied lengths."""
    samples = []
    for i in range(batch):
        length = 2 + (i % (max_len - 1))
        items = [1 + ((i + j * 3) % vocab_size) for j in range(length)]
        times = [round(0.05 + 0.9 * j / max(length, 2) + 0.01 * i, 6) for j in range(length)]
        pad = max_len - length
        samples.append(
            SequenceSample(
                history_items=[0] * pad + items,
                history_times=[0.0] * pad + times,
                history_mask=[False] * pad + [True] * length,
                target_item=1 + ((i * 5 + 2) % vocab_size),
                target_time=min(times[-1] + 0.05, 1.0),
                user_id=f"probe{i}",
            )
        )
    return samples


def build_probe(
    d: int = 8,
    T: int = 4,
    layers: int = 2,
    batch: int = 4,
    kind: str = "gaussian",
    seed: int = 0,
):
    """Returns (model, batch tensors, fixed draws, schedule, loss config)."""
    model_cfg = ModelConfig(d=d, layers=layers, heads=2, ffn_mult=2, dtype="float64", init_seed=seed)
    time_cfg = TimeEncoderConfig(kind=kind, sigma=0.2, seed=seed)
    toi_cfg = ToiConfig(enabled=True, gamma=0.7, hidden_mult=2)
    loss_cfg = LossConfig(lambda_=0.4, eta=0.5, k=2)
    vocab_size = 11
    samples = probe_samples(batch)
    model = RecModel(model_cfg, time_cfg, toi_cfg, vocab_size, len(samples[0].history_items))
    tensors = batch_to_tensors(samples, torch.float64)
    schedule = build_schedule(T, "linear", 0.1, 0.3)
    gen = torch.Generator().manual_seed(seed + 1)
    # p_uncond=0.5 so the unconditional token sees gradient in a 4-sample batch
    draws = draw_step(batch, d, T, loss_cfg.k, 0.5, gen, torch.float64)
    if not draws.uncond.any():
        draws.uncond[0] = True
    return model, tensors, draws, schedule, loss_cfg


def run_grad_probe(d: int = 8, T: int = 4, layers: int = 2, batch: int = 4) -> dict:
    """Per-module max relative error between autograd and central differences."""
    model, tensors, draws, schedule, loss_cfg = build_probe(d=d, T=T, layers=layers, batch=batch)
    errors = grad_check(model, tensors, draws, schedule, loss_cfg)
    return grad_check_groups(errors)
