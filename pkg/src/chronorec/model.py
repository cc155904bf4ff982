"""Learnable components and their assembly into one recommendation model.

The model owns: the item embedding table (row 0 = padding), the sequence
encoder (pre-norm transformer blocks over the time-fused sequence), the
next-time predictor and its fusion head, the x0-predicting denoiser with its
step embedding, and the learned unconditional condition token used by
classifier-free guidance.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple, Optional

import torch
from torch import Tensor, nn

from .config import ModelConfig, TimeEncoderConfig, ToiConfig
from .time_encoding import SinusoidalEncoder, fuse_sequence, make_time_encoder

TORCH_DTYPES = {"float64": torch.float64, "float32": torch.float32}

CHECKPOINT_VERSION = 1


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, d: int, heads: int, dropout: float):
        super().__init__()
        if d % heads != 0:
            raise ValueError("heads must divide d")
        self.d = d
        self.heads = heads
        self.head_dim = d // heads
        self.q_proj = nn.Linear(d, d)
        self.k_proj = nn.Linear(d, d)
        self.v_proj = nn.Linear(d, d)
        self.out_proj = nn.Linear(d, d)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: Tensor, key_mask: Tensor, return_weights: bool = False):
        """key_mask: (B, L) bool, True at real positions. Padded keys get -inf logits."""
        B, L, _ = x.shape
        q = self.q_proj(x).view(B, L, self.heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(x).view(B, L, self.heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(x).view(B, L, self.heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        weights = self.dropout(weights)
        out = (weights @ v).transpose(1, 2).reshape(B, L, self.d)
        out = self.out_proj(out)
        if return_weights:
            return out, weights
        return out


class EncoderBlock(nn.Module):
    """Pre-norm residual block: attention then position-wise feed-forward."""

    def __init__(self, d: int, heads: int, ffn_mult: int, dropout: float):
        super().__init__()
        self.attn_norm = nn.LayerNorm(d)
        self.attn = MultiHeadSelfAttention(d, heads, dropout)
        self.ffn_norm = nn.LayerNorm(d)
        self.ffn = nn.Sequential(
            nn.Linear(d, ffn_mult * d),
            nn.GELU(),
            nn.Linear(ffn_mult * d, d),
        )
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: Tensor, key_mask: Tensor) -> Tensor:
        x = x + self.dropout(self.attn(self.attn_norm(x), key_mask))
        x = x + self.dropout(self.ffn(self.ffn_norm(x)))
        return x


class SequenceEncoder(nn.Module):
    """Stack of blocks plus a final norm; reads out the last real position."""

    def __init__(self, d: int, layers: int, heads: int, ffn_mult: int, dropout: float):
        super().__init__()
        self.blocks = nn.ModuleList(
            EncoderBlock(d, heads, ffn_mult, dropout) for _ in range(layers)
        )
        self.final_norm = nn.LayerNorm(d)

    def forward(self, x: Tensor, key_mask: Tensor) -> Tensor:
        if not torch.all(key_mask.any(dim=1)):
            raise ValueError("every sequence needs at least one non-padding position")
        for block in self.blocks:
            x = block(x, key_mask)
        return self.final_norm(x)


def last_real_index(mask: Tensor) -> Tensor:
    """Index of the last True per row of a (B, L) bool mask."""
    L = mask.shape[1]
    return L - 1 - mask.flip(1).int().argmax(dim=1)


class TwoLayerHead(nn.Module):
    """Feed-forward map from a (2d)-vector pair to a d-vector."""

    def __init__(self, d: int, hidden_mult: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(2 * d, hidden_mult * d),
            nn.GELU(),
            nn.Linear(hidden_mult * d, d),
        )

    def forward(self, a: Tensor, b: Tensor) -> Tensor:
        return self.net(torch.cat([a, b], dim=-1))


class Denoiser(nn.Module):
    """x0-prediction network: (noised target, step embedding, condition) -> clean target."""

    def __init__(self, d: int, hidden_mult: int, dtype: torch.dtype):
        super().__init__()
        self.step_encoder = SinusoidalEncoder(d, dtype=dtype)
        self.net = nn.Sequential(
            nn.Linear(3 * d, hidden_mult * d),
            nn.GELU(),
            nn.Linear(hidden_mult * d, d),
        )

    def forward(self, e_t: Tensor, t: Tensor, condition: Tensor) -> Tensor:
        if t.dim() == 0:
            t = t.expand(e_t.shape[0])
        step_emb = self.step_encoder(t.to(e_t.dtype))
        return self.net(torch.cat([e_t, step_emb, condition], dim=-1))


class UserState(NamedTuple):
    g: Tensor                  # base user representation, (B, d)
    g_prime: Tensor            # time-enriched representation fed to the denoiser
    tau_hat: Optional[Tensor]  # predicted next-time embedding, None when disabled
    tau_prev: Optional[Tensor]  # time embedding of the most recent interaction


class RecModel(nn.Module):
    def __init__(
        self,
        model_cfg: ModelConfig,
        time_cfg: TimeEncoderConfig,
        toi_cfg: ToiConfig,
        vocab_size: int,
        max_len: int,
    ):
        super().__init__()
        if time_cfg.kind == "position" and toi_cfg.enabled:
            raise ValueError("next-time prediction needs real timestamps")
        self.model_cfg = model_cfg
        self.time_cfg = time_cfg
        self.toi_cfg = toi_cfg
        self.vocab_size = vocab_size
        self.max_len = max_len
        d = model_cfg.d
        dtype = TORCH_DTYPES[model_cfg.dtype]

        self.item_emb = nn.Embedding(vocab_size + 1, d, padding_idx=0)
        if time_cfg.kind == "position":
            self.pos_emb = nn.Embedding(max_len, d)
            self.time_encoder = None
        else:
            self.pos_emb = None
            self.time_encoder = make_time_encoder(time_cfg, d, dtype)
        self.encoder = SequenceEncoder(
            d, model_cfg.layers, model_cfg.heads, model_cfg.ffn_mult, model_cfg.dropout
        )
        if toi_cfg.enabled:
            self.time_predictor = TwoLayerHead(d, toi_cfg.hidden_mult)
            self.fusion = TwoLayerHead(d, toi_cfg.hidden_mult)
        else:
            self.time_predictor = None
            self.fusion = None
        self.denoiser = Denoiser(d, model_cfg.denoiser_hidden_mult, dtype)
        self.uncond_token = nn.Parameter(torch.zeros(d))

        self.to(dtype)
        self.reset_parameters(model_cfg.init_seed)

    @property
    def dtype(self) -> torch.dtype:
        return self.item_emb.weight.dtype

    def reset_parameters(self, seed: int) -> None:
        """Uniform(-1/sqrt(d), 1/sqrt(d)) for embeddings and projections, zero biases."""
        bound = 1.0 / math.sqrt(self.model_cfg.d)
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for name, p in self.named_parameters():
                if p.dim() >= 2 or name == "uncond_token":
                    init = torch.empty(p.shape, dtype=torch.float64)
                    init.uniform_(-bound, bound, generator=gen)
                    p.copy_(init.to(p.dtype))
                elif "norm" in name and name.endswith("weight"):
                    p.fill_(1.0)
                else:
                    p.zero_()
            self.item_emb.weight[0].zero_()

    # --- sequence side ------------------------------------------------------

    def embed_history(self, items: Tensor, times: Tensor, mask: Tensor) -> tuple:
        """Returns (fused sequence (B, L, d), tau_prev or None).

        Item embeddings are scaled by sqrt(d) before the additive fusion so the
        fixed-scale time embeddings do not drown the learned item content.
        """
        e = self.item_emb(items) * math.sqrt(self.model_cfg.d)
        if self.time_cfg.kind == "position":
            positions = torch.arange(items.shape[1], device=items.device)
            pos = self.pos_emb(positions).unsqueeze(0).expand_as(e)
            return fuse_sequence(e, pos, mask), None
        tau = self.time_encoder(times.to(self.dtype))
        fused = fuse_sequence(e, tau, mask)
        last = last_real_index(mask)
        tau_prev = tau[torch.arange(items.shape[0], device=items.device), last]
        return fused, tau_prev

    def encode(self, fused: Tensor, mask: Tensor) -> Tensor:
        h = self.encoder(fused, mask)
        last = last_real_index(mask)
        return h[torch.arange(h.shape[0], device=h.device), last]

    def predict_time(self, g: Tensor, tau_prev: Tensor) -> Tensor:
        return self.time_predictor(g, tau_prev)

    def enrich(self, g: Tensor, tau_hat: Tensor) -> Tensor:
        gamma = self.toi_cfg.gamma
        return (1.0 - gamma) * g + gamma * self.fusion(g, tau_hat)

    def user_state(self, items: Tensor, times: Tensor, mask: Tensor) -> UserState:
        fused, tau_prev = self.embed_history(items, times, mask)
        g = self.encode(fused, mask)
        if not self.toi_cfg.enabled:
            return UserState(g, g, None, tau_prev)
        tau_hat = self.predict_time(g, tau_prev)
        return UserState(g, self.enrich(g, tau_hat), tau_hat, tau_prev)

    def encode_target_time(self, target_time: Tensor) -> Tensor:
        """Ground-truth next-time embedding via the shared history encoder."""
        if self.time_encoder is None:
            raise ValueError("position encoding has no target-time embedding")
        return self.time_encoder(target_time.to(self.dtype))

    # --- diffusion side -------------------------------------------------------

    def denoise(self, e_t: Tensor, t: Tensor, condition: Tensor) -> Tensor:
        return self.denoiser(e_t, t, condition)

    def guided_denoise(self, e_t: Tensor, t: Tensor, condition: Tensor, w: float) -> Tensor:
        """Classifier-free guidance: (1+w)*conditional - w*unconditional."""
        if w == 0.0:
            return self.denoise(e_t, t, condition)
        uncond = self.uncond_token.unsqueeze(0).expand_as(condition)
        return (1.0 + w) * self.denoise(e_t, t, condition) - w * self.denoise(e_t, t, uncond)

    # --- catalog scoring ------------------------------------------------------

    def score_candidates(self, vector: Tensor) -> Tensor:
        """Similarity of (B, d) or (d,) queries against every item row.

        Returns (B, V+1) or (V+1,); index 0 is the padding row and is excluded
        from ranking by the evaluator.
        """
        table = self.item_emb.weight
        if self.model_cfg.ranking == "cosine":
            table = table / table.norm(dim=-1, keepdim=True).clamp_min(1e-12)
            vector = vector / vector.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        return vector @ table.T


def checkpoint_payload(model: RecModel, extra: Optional[dict] = None) -> dict:
    return {
        "format_version": CHECKPOINT_VERSION,
        "model_cfg": asdict(model.model_cfg),
        "time_cfg": asdict(model.time_cfg),
        "toi_cfg": asdict(model.toi_cfg),
        "vocab_size": model.vocab_size,
        "max_len": model.max_len,
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }


def save_checkpoint(path: str, model: RecModel, extra: Optional[dict] = None) -> None:
    torch.save(checkpoint_payload(model, extra), path)


def load_checkpoint(path: str) -> tuple:
    """Returns (RecModel, extra dict). The rff frequency buffer restores exactly."""
    payload = torch.load(path, weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r}")
    model = RecModel(
        ModelConfig(**payload["model_cfg"]),
        TimeEncoderConfig(**payload["time_cfg"]),
        ToiConfig(**payload["toi_cfg"]),
        payload["vocab_size"],
        payload["max_len"],
    )
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload["extra"]
