"""Full-catalog ranking, hit-rate / NDCG accumulation, and report output.

Evaluation per sample: encode the history, predict and fuse the next-time
embedding (when enabled), run the guided reverse-diffusion chain to a
predicted item embedding, rank the whole catalog by similarity (ties broken
by ascending item index), then score the target's rank. The cosine between
predicted and true next-time embeddings is recorded for the accuracy
histogram.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch

from .config import DiffusionConfig, EvalConfig
from .data import PAD_INDEX, SequenceSample
from .diffusion import DiffusionSchedule, initial_noise, sample as ddim_sample
from .model import RecModel


@dataclass
class MetricsReport:
    hr: dict            # K -> hit rate in [0, 1]
    ndcg: dict          # K -> NDCG in [0, 1]
    toi_cosine: list    # per-sample predicted/true next-time cosine
    sample_count: int

    def to_text(self) -> str:
        lines = [f"samples\t{self.sample_count}"]
        for k in sorted(self.hr):
            lines.append(f"hr@{k}\t{self.hr[k]:.6f}")
        for k in sorted(self.ndcg):
            lines.append(f"ndcg@{k}\t{self.ndcg[k]:.6f}")
        if self.toi_cosine:
            ordered = sorted(self.toi_cosine)
            median = ordered[len(ordered) // 2]
            lines.append(f"toi_cosine_median\t{median:.6f}")
            lines.append(f"toi_cosine_mean\t{sum(ordered) / len(ordered):.6f}")
        return "\n".join(lines) + "\n"

    def toi_histogram(self, bins: int = 20) -> list:
        """Fixed-bin histogram rows (lo, hi, count) over [-1, 1]."""
        counts = [0] * bins
        for value in self.toi_cosine:
            idx = int((value + 1.0) / 2.0 * bins)
            counts[min(max(idx, 0), bins - 1)] += 1
        rows = []
        for i, count in enumerate(counts):
            rows.append((-1.0 + 2.0 * i / bins, -1.0 + 2.0 * (i + 1) / bins, count))
        return rows

    def metric(self, name: str) -> float:
        """Look up "hr@5" / "ndcg@10" style names."""
        kind, _, k = name.partition("@")
        table = {"hr": self.hr, "ndcg": self.ndcg, "h": self.hr, "n": self.ndcg}[kind.lower()]
        return table[int(k)]


def rank_items(
    predicted: torch.Tensor,
    model: RecModel,
    exclude: Sequence[int] = (),
) -> list:
    """Catalog indices ordered by descending similarity, ties by ascending index.

    The padding row is always excluded; extra indices may be excluded too.
    """
    scores = model.score_candidates(predicted).detach()
    if scores.dim() != 1:
        raise ValueError("rank_items expects a single query vector")
    excluded = set(exclude)
    excluded.add(PAD_INDEX)
    order = sorted(
        (i for i in range(scores.shape[0]) if i not in excluded),
        key=lambda i: (-float(scores[i]), i),
    )
    return order


def hit_at_k(rank: int, k: int) -> int:
    if rank < 1:
        raise ValueError("ranks are 1-based")
    return 1 if rank <= k else 0


def ndcg_at_k(rank: int, k: int) -> float:
    """Single relevant item, ideal DCG = 1: 1/log2(rank+1) inside the cutoff."""
    if rank < 1:
        raise ValueError("ranks are 1-based")
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def rank_of_target(scores: torch.Tensor, target: int, exclude: Sequence[int] = ()) -> int:
    """1-based rank of the target under descending score, index-ascending ties."""
    s_t = scores[target]
    idx = torch.arange(scores.shape[0])
    candidate = torch.ones(scores.shape[0], dtype=torch.bool)
    candidate[PAD_INDEX] = False
    for i in exclude:
        candidate[i] = False
    candidate[target] = False
    beats = (scores > s_t) | ((scores == s_t) & (idx < target))
    return int((beats & candidate).sum().item()) + 1


def _batches(n: int, size: int):
    for lo in range(0, n, size):
        yield lo, min(lo + size, n)


@torch.no_grad()
def evaluate(
    model: RecModel,
    samples: Sequence[SequenceSample],
    schedule: DiffusionSchedule,
    diffusion_cfg: DiffusionConfig,
    eval_cfg: EvalConfig,
    batch_size: int = 32,
) -> MetricsReport:
    """Rank the catalog for every sample and accumulate H@K / N@K.

    Reverse-chain noise is seeded per global sample index, so the report is
    independent of batching order and identical between repeated runs.
    """
    from .trainer import batch_to_tensors  # local import to avoid a cycle

    model.eval()
    ks = tuple(eval_cfg.ks)
    hits = {k: 0 for k in ks}
    gains = {k: 0.0 for k in ks}
    toi_cosine: list = []
    n = len(samples)
    # one seeded noise row per global sample index, independent of batching
    noise_all = initial_noise(n, model.model_cfg.d, eval_cfg.seed, model.dtype)
    for lo, hi in _batches(n, batch_size):
        chunk = samples[lo:hi]
        batch = batch_to_tensors(chunk, model.dtype)
        state = model.user_state(batch["items"], batch["times"], batch["mask"])
        noise = noise_all[lo:hi]
        predicted = ddim_sample(
            model,
            state.g_prime,
            schedule,
            diffusion_cfg.infer_steps,
            diffusion_cfg.w,
            noise=noise,
        )
        scores = model.score_candidates(predicted)
        if state.tau_hat is not None:
            tau_true = model.encode_target_time(batch["target_time"])
            sim = torch.nn.functional.cosine_similarity(state.tau_hat, tau_true, dim=-1)
            toi_cosine.extend(float(v) for v in sim)
        for j, s in enumerate(chunk):
            exclude = []
            if eval_cfg.exclude_history:
                exclude = [i for i, m in zip(s.history_items, s.history_mask) if m]
            rank = rank_of_target(scores[j], s.target_item, exclude)
            for k in ks:
                hits[k] += hit_at_k(rank, k)
                gains[k] += ndcg_at_k(rank, k)
    return MetricsReport(
        hr={k: hits[k] / n for k in ks},
        ndcg={k: gains[k] / n for k in ks},
        toi_cosine=toi_cosine,
        sample_count=n,
    )


def save_report(report: MetricsReport, path: str, histogram_path: Optional[str] = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report.to_text())
    if histogram_path:
        with open(histogram_path, "w", encoding="utf-8") as fh:
            fh.write("bin_lo\tbin_hi\tcount\n")
            for lo, hi, count in report.toi_histogram():
                fh.write(f"{lo:.2f}\t{hi:.2f}\t{count}\n")
