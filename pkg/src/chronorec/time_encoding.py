"""Scalar-time embedding functions and fusion into item-embedding sequences.

Three interchangeable encoders map a normalized timestamp t in [0, 1] to a
d-dimensional vector: interleaved sinusoids, a bank of Gaussian kernels on a
fixed center grid, and random Fourier features with frozen frequencies. The
learned absolute-position table used by the ablation baseline lives with the
model parameters, not here.
"""

from __future__ import annotations

import math

import torch
from torch import Tensor, nn

from .config import TimeEncoderConfig


class SinusoidalEncoder(nn.Module):
    """TE[2i] = sin(t / freq^{2i/d}), TE[2i+1] = cos(t / freq^{2i/d})."""

    def __init__(self, dim: int, freq: float = 10000.0, dtype: torch.dtype = torch.float64):
        super().__init__()
        if dim % 2 != 0 or dim <= 0:
            raise ValueError("sinusoidal encoder needs an even positive dim")
        if freq <= 0:
            raise ValueError("freq must be > 0")
        self.dim = dim
        exponents = torch.arange(0, dim, 2, dtype=dtype) / dim
        self.register_buffer("inv_freq", freq ** (-exponents))

    def forward(self, t: Tensor) -> Tensor:
        args = t.to(self.inv_freq.dtype).unsqueeze(-1) * self.inv_freq
        out = torch.empty(*args.shape[:-1], self.dim, dtype=args.dtype, device=args.device)
        out[..., 0::2] = torch.sin(args)
        out[..., 1::2] = torch.cos(args)
        return out


class GaussianKernelEncoder(nn.Module):
    """TE[j] = exp(-(t - c_j)^2 / (2 sigma^2)) with centers c_j = j/(d-1)."""

    def __init__(self, dim: int, sigma: float, dtype: torch.dtype = torch.float64):
        super().__init__()
        if dim < 2:
            raise ValueError("gaussian encoder needs dim >= 2")
        if sigma <= 0:
            raise ValueError("sigma must be > 0")
        self.dim = dim
        self.sigma = float(sigma)
        self.register_buffer("centers", torch.arange(dim, dtype=dtype) / (dim - 1))

    def forward(self, t: Tensor) -> Tensor:
        diff = t.to(self.centers.dtype).unsqueeze(-1) - self.centers
        return torch.exp(-(diff**2) / (2.0 * self.sigma**2))


class RandomFourierEncoder(nn.Module):
    """TE = [cos(2 pi b_k t)]_k ++ [sin(2 pi b_k t)]_k with b_k ~ N(0, sigma^2).

    Frequencies are drawn once from the given seed at construction and frozen;
    they ride along in the state dict as a buffer so checkpoints restore the
    exact embedding.
    """

    def __init__(self, dim: int, sigma: float, seed: int = 0, dtype: torch.dtype = torch.float64):
        super().__init__()
        if dim % 2 != 0 or dim <= 0:
            raise ValueError("rff encoder needs an even positive dim")
        if sigma <= 0:
            raise ValueError("sigma must be > 0")
        self.dim = dim
        gen = torch.Generator().manual_seed(int(seed))
        freqs = torch.randn(dim // 2, generator=gen, dtype=torch.float64) * sigma
        self.register_buffer("freqs", freqs.to(dtype))

    def forward(self, t: Tensor) -> Tensor:
        args = 2.0 * math.pi * t.to(self.freqs.dtype).unsqueeze(-1) * self.freqs
        return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def make_time_encoder(cfg: TimeEncoderConfig, dim: int, dtype: torch.dtype) -> nn.Module:
    if cfg.kind == "sinusoidal":
        return SinusoidalEncoder(dim, cfg.freq, dtype)
    if cfg.kind == "gaussian":
        return GaussianKernelEncoder(dim, cfg.sigma, dtype)
    if cfg.kind == "rff":
        return RandomFourierEncoder(dim, cfg.sigma, cfg.seed, dtype)
    raise ValueError(f"no functional time encoder for kind {cfg.kind!r}")


def fuse_sequence(item_embeddings: Tensor, time_embeddings: Tensor, mask: Tensor) -> Tensor:
    """Elementwise item + time at unmasked positions; padding passes through."""
    if item_embeddings.shape != time_embeddings.shape:
        raise ValueError(
            f"shape mismatch: items {tuple(item_embeddings.shape)} vs "
            f"times {tuple(time_embeddings.shape)}"
        )
    return item_embeddings + time_embeddings * mask.to(item_embeddings.dtype).unsqueeze(-1)
