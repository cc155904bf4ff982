"""Synthetic interaction logs with a known gap-dependent joint law, plus the
exact Bayes-optimal next-item oracle for that law.

Each user draws a hidden archetype. Events then follow a Markov chain whose
next-item distribution depends on the bucketed time gap (short vs long, split
at a day threshold) since the previous event; the archetype controls how often
each bucket occurs and the gap law inside each bucket. Because everything is
discrete, the posterior over archetypes given a history is exactly enumerable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data import SECONDS_PER_DAY, RawEvent

SHORT, LONG = 0, 1
BUCKET_NAMES = ("short", "long")


@dataclass(frozen=True)
class GapLaw:
    """Discrete distribution over day gaps, normalized support in (0, 1]."""

    day_values: tuple
    probs: tuple

    def __post_init__(self):
        if len(self.day_values) != len(self.probs) or not self.day_values:
            raise ValueError("gap law needs matching non-empty values/probs")
        if any(v < 1 for v in self.day_values):
            raise ValueError("gap days must be >= 1")
        if abs(sum(self.probs) - 1.0) > 1e-9 or any(p < 0 for p in self.probs):
            raise ValueError("gap probs must be a distribution")

    def pmf(self, days: int) -> float:
        for v, p in zip(self.day_values, self.probs):
            if v == days:
                return p
        return 0.0


@dataclass(frozen=True)
class Archetype:
    name: str
    bucket_probs: tuple          # (P(short), P(long))
    gap_laws: tuple              # (short GapLaw, long GapLaw)
    transitions: tuple           # transitions[bucket]: (M, M) row-stochastic

    def __post_init__(self):
        if len(self.bucket_probs) != 2 or abs(sum(self.bucket_probs) - 1.0) > 1e-9:
            raise ValueError("bucket_probs must be a 2-way distribution")
        for bucket in (SHORT, LONG):
            rows = np.asarray(self.transitions[bucket], dtype=np.float64)
            if rows.ndim != 2 or rows.shape[0] != rows.shape[1]:
                raise ValueError("transition tables must be square")
            if not np.allclose(rows.sum(axis=1), 1.0, atol=1e-9) or (rows < 0).any():
                raise ValueError("transition rows must sum to 1")

    def transition(self, bucket: int) -> np.ndarray:
        return np.asarray(self.transitions[bucket], dtype=np.float64)


@dataclass(frozen=True)
class SynthSpec:
    user_count: int
    catalog_size: int
    archetypes: tuple
    archetype_probs: tuple
    gap_threshold_days: int
    time_scale_days: int
    min_events: int
    max_events: int
    seed: int

    def __post_init__(self):
        if abs(sum(self.archetype_probs) - 1.0) > 1e-9:
            raise ValueError("archetype_probs must sum to 1")
        if len(self.archetype_probs) != len(self.archetypes):
            raise ValueError("one probability per archetype")
        if self.min_events < 2 or self.max_events < self.min_events:
            raise ValueError("need 2 <= min_events <= max_events")
        for arch in self.archetypes:
            for bucket in (SHORT, LONG):
                law = arch.gap_laws[bucket]
                if max(law.day_values) > self.time_scale_days:
                    raise ValueError("gap support must stay within time_scale_days")
                short_side = all(v <= self.gap_threshold_days for v in law.day_values)
                long_side = all(v > self.gap_threshold_days for v in law.day_values)
                if bucket == SHORT and not short_side:
                    raise ValueError(f"{arch.name}: short gaps must be <= threshold")
                if bucket == LONG and not long_side:
                    raise ValueError(f"{arch.name}: long gaps must be > threshold")

    @property
    def gap_threshold(self) -> float:
        """Normalized-time split between buckets."""
        return self.gap_threshold_days / self.time_scale_days

    def bucket_of(self, gap_days: int) -> int:
        return SHORT if gap_days <= self.gap_threshold_days else LONG

    def item_id(self, index: int) -> str:
        return f"i{index:04d}"

    def to_json(self) -> str:
        payload = {
            "user_count": self.user_count,
            "catalog_size": self.catalog_size,
            "archetype_probs": list(self.archetype_probs),
            "gap_threshold_days": self.gap_threshold_days,
            "time_scale_days": self.time_scale_days,
            "min_events": self.min_events,
            "max_events": self.max_events,
            "seed": self.seed,
            "archetypes": [
                {
                    "name": a.name,
                    "bucket_probs": list(a.bucket_probs),
                    "gap_laws": [
                        {"day_values": list(law.day_values), "probs": list(law.probs)}
                        for law in a.gap_laws
                    ],
                    "transitions": [np.asarray(t).tolist() for t in a.transitions],
                }
                for a in self.archetypes
            ],
        }
        return json.dumps(payload, sort_keys=True, indent=2)

    @staticmethod
    def from_json(text: str) -> "SynthSpec":
        payload = json.loads(text)
        archetypes = tuple(
            Archetype(
                name=a["name"],
                bucket_probs=tuple(a["bucket_probs"]),
                gap_laws=tuple(
                    GapLaw(tuple(law["day_values"]), tuple(law["probs"]))
                    for law in a["gap_laws"]
                ),
                transitions=tuple(np.asarray(t, dtype=np.float64) for t in a["transitions"]),
            )
            for a in payload["archetypes"]
        )
        return SynthSpec(
            user_count=payload["user_count"],
            catalog_size=payload["catalog_size"],
            archetypes=archetypes,
            archetype_probs=tuple(payload["archetype_probs"]),
            gap_threshold_days=payload["gap_threshold_days"],
            time_scale_days=payload["time_scale_days"],
            min_events=payload["min_events"],
            max_events=payload["max_events"],
            seed=payload["seed"],
        )


def _user_rng(spec: SynthSpec, user_index: int) -> np.random.Generator:
    # per-user derived stream: generation order never depends on other users
    return np.random.default_rng((spec.seed, user_index))


def generate(spec: SynthSpec) -> list:
    """Roll every user's gap-dependent Markov chain into raw events."""
    events: list[RawEvent] = []
    for u in range(spec.user_count):
        rng = _user_rng(spec, u)
        arch_idx = int(rng.choice(len(spec.archetypes), p=spec.archetype_probs))
        arch = spec.archetypes[arch_idx]
        n = int(rng.integers(spec.min_events, spec.max_events + 1))
        day = int(rng.integers(0, 30))
        item = int(rng.integers(0, spec.catalog_size))
        user_id = f"u{u:05d}"
        events.append(RawEvent(user_id, spec.item_id(item), day * SECONDS_PER_DAY))
        for _ in range(n - 1):
            bucket = SHORT if rng.random() < arch.bucket_probs[SHORT] else LONG
            law = arch.gap_laws[bucket]
            gap = int(rng.choice(law.day_values, p=law.probs))
            day += gap
            item = int(rng.choice(spec.catalog_size, p=arch.transition(bucket)[item]))
            events.append(RawEvent(user_id, spec.item_id(item), day * SECONDS_PER_DAY))
    return events


def user_histories(events: Sequence[RawEvent]) -> dict:
    """user_id -> (catalog item indices, day gaps between consecutive events).

    Item ids must follow the spec's "i%04d" naming. Events are assumed grouped
    per user in chronological order, as generate() emits them.
    """
    histories: dict[str, tuple[list, list]] = {}
    last_day: dict[str, int] = {}
    for ev in events:
        day = ev.timestamp // SECONDS_PER_DAY
        items, gaps = histories.setdefault(ev.user_id, ([], []))
        if items:
            gaps.append(day - last_day[ev.user_id])
        items.append(int(ev.item_id[1:]))
        last_day[ev.user_id] = day
    return histories


def archetype_log_posterior(
    item_history: Sequence[int],
    gap_days_history: Sequence[int],
    spec: SynthSpec,
) -> np.ndarray:
    """Unnormalized log posterior over archetypes given one user's history."""
    if len(gap_days_history) != max(len(item_history) - 1, 0):
        raise ValueError("need one gap per consecutive event pair")
    scores = np.zeros(len(spec.archetypes), dtype=np.float64)
    for a, arch in enumerate(spec.archetypes):
        logp = math.log(spec.archetype_probs[a]) if spec.archetype_probs[a] > 0 else -math.inf
        for i, gap in enumerate(gap_days_history):
            bucket = spec.bucket_of(gap)
            p_bucket = arch.bucket_probs[bucket]
            p_gap = arch.gap_laws[bucket].pmf(int(gap))
            p_item = arch.transition(bucket)[item_history[i], item_history[i + 1]]
            step_p = p_bucket * p_gap * p_item
            logp += math.log(step_p) if step_p > 0 else -math.inf
        scores[a] = logp
    return scores


def archetype_posterior(
    item_history: Sequence[int],
    gap_days_history: Sequence[int],
    spec: SynthSpec,
) -> np.ndarray:
    log_post = archetype_log_posterior(item_history, gap_days_history, spec)
    if np.all(np.isneginf(log_post)):
        raise ValueError("history has probability 0 under every archetype")
    shifted = log_post - np.max(log_post[np.isfinite(log_post)])
    weights = np.where(np.isneginf(shifted), 0.0, np.exp(shifted))
    return weights / weights.sum()


def next_item_distribution(
    item_history: Sequence[int],
    gap_days_history: Sequence[int],
    spec: SynthSpec,
    condition_bucket: Optional[int] = None,
) -> np.ndarray:
    """Posterior-predictive next-item law, marginalized over the next gap.

    condition_bucket forces the next-gap bucket instead of marginalizing,
    exposing how the optimal prediction shifts with timing.
    """
    post = archetype_posterior(item_history, gap_days_history, spec)
    last = item_history[-1]
    dist = np.zeros(spec.catalog_size, dtype=np.float64)
    for a, arch in enumerate(spec.archetypes):
        if post[a] == 0.0:
            continue
        if condition_bucket is None:
            for bucket in (SHORT, LONG):
                dist += post[a] * arch.bucket_probs[bucket] * arch.transition(bucket)[last]
        else:
            dist += post[a] * arch.transition(condition_bucket)[last]
    return dist / dist.sum()


def bayes_optimal_rank(
    item_history: Sequence[int],
    gap_days_history: Sequence[int],
    spec: SynthSpec,
    condition_bucket: Optional[int] = None,
) -> list:
    """Catalog indices by descending posterior-predictive probability.

    Ties break by ascending index, matching the model-side ranking rule.
    """
    dist = next_item_distribution(item_history, gap_days_history, spec, condition_bucket)
    return sorted(range(spec.catalog_size), key=lambda i: (-dist[i], i))


def oracle_hit_rate(spec: SynthSpec, events: Sequence[RawEvent], at: int = 1) -> float:
    """Leave-one-out H@at of the exact oracle over the generated users."""
    histories = user_histories(events)
    hits = 0
    total = 0
    for items, gaps in histories.values():
        if len(items) < 2:
            continue
        ranking = bayes_optimal_rank(items[:-1], gaps[:-1], spec)
        hits += int(items[-1] in ranking[:at])
        total += 1
    return hits / total if total else 0.0


def gap_benchmark_spec(
    user_count: int = 500,
    catalog_size: int = 40,
    seed: int = 0,
    q_hit: float = 0.9,
    fast_short_prob: float = 0.95,
    min_events: int = 6,
    max_events: int = 11,
) -> SynthSpec:
    """Benchmark law where timing carries most of the next-item signal.

    Both archetypes share the bucket-conditional transition tables; they
    differ only in how often short gaps occur, so the gap sequence identifies
    the archetype almost immediately while the item sequence alone carries
    little about it. Each (item, bucket) spreads q_hit over five weighted
    successors, so the two buckets together offer ten plausible candidates:
    a top-5 ranking that cannot tell the buckets apart covers at most half of
    them, keeping the timing signal visible at the H@5 cutoff.
    """
    M = catalog_size
    fan_out = min(5, M - 1)
    weights = (0.3, 0.25, 0.2, 0.15, 0.1)[:fan_out]
    weight_sum = sum(weights)

    def table(offset: int) -> np.ndarray:
        t = np.full((M, M), (1.0 - q_hit) / (M - fan_out), dtype=np.float64)
        for a in range(M):
            for j, wv in enumerate(weights):
                t[a, (a + offset + j) % M] = q_hit * wv / weight_sum
        return t

    transitions = (table(1), table(M // 2))
    short_law = GapLaw((1, 2, 3), (1 / 3, 1 / 3, 1 / 3))
    long_days = tuple(range(18, 31))
    long_law = GapLaw(long_days, tuple(1 / len(long_days) for _ in long_days))
    archetypes = (
        Archetype(
            name="brisk",
            bucket_probs=(fast_short_prob, 1.0 - fast_short_prob),
            gap_laws=(short_law, long_law),
            transitions=transitions,
        ),
        Archetype(
            name="leisurely",
            bucket_probs=(1.0 - fast_short_prob, fast_short_prob),
            gap_laws=(short_law, long_law),
            transitions=transitions,
        ),
    )
    return SynthSpec(
        user_count=user_count,
        catalog_size=M,
        archetypes=archetypes,
        archetype_probs=(0.5, 0.5),
        gap_threshold_days=8,
        time_scale_days=32,
        min_events=min_events,
        max_events=max_events,
        seed=seed,
    )
