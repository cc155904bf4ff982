"""Interaction-log ingestion, core filtering, time normalization, and splits.

The pipeline is: load_events -> filter_core -> group/normalize -> build_vocab ->
build_sequences -> split. Everything downstream consumes SequenceSample lists.
Timestamps are reduced to day granularity, shifted to start at zero, and scaled
by the dataset-global maximum so all normalized times live in [0, 1].
"""

from __future__ import annotations

import csv
import gzip
import hashlib
import json
import logging
import random
from dataclasses import dataclass, field
from typing import Iterable, Sequence

logger = logging.getLogger(__name__)

SECONDS_PER_DAY = 86400
PAD_INDEX = 0


class DataError(Exception):
    """Unreadable input or malformed rows under strict parsing."""


class DegenerateDatasetError(DataError):
    """dataset degenerate: no events survive filtering."""


@dataclass(frozen=True)
class RawEvent:
    user_id: str
    item_id: str
    timestamp: int

    def __post_init__(self):
        if not self.user_id or not self.item_id:
            raise DataError("user_id and item_id must be non-empty")
        if self.timestamp < 0:
            raise DataError(f"timestamp must be >= 0, got {self.timestamp}")


@dataclass(frozen=True)
class LoadResult:
    events: tuple
    rows_read: int
    rows_skipped: int


@dataclass(frozen=True)
class Vocab:
    """Bijection item_id <-> index in [1, |items|]; index 0 is the padding token."""

    items: tuple

    def __post_init__(self):
        if len(set(self.items)) != len(self.items):
            raise DataError("vocab items must be unique")

    @property
    def size(self) -> int:
        return len(self.items)

    def index(self, item_id: str) -> int:
        # built rarely; cache the reverse map on first use
        mapping = self.__dict__.get("_map")
        if mapping is None:
            mapping = {item: i + 1 for i, item in enumerate(self.items)}
            object.__setattr__(self, "_map", mapping)
        return mapping[item_id]

    def item(self, index: int) -> str:
        if index == PAD_INDEX:
            raise KeyError("index 0 is the padding token")
        return self.items[index - 1]

    def __contains__(self, item_id: str) -> bool:
        try:
            self.index(item_id)
            return True
        except KeyError:
            return False

    def sha256(self) -> str:
        h = hashlib.sha256()
        for item in self.items:
            h.update(item.encode("utf-8"))
            h.update(b"\x00")
        return h.hexdigest()


@dataclass
class SequenceSample:
    """One left-padded training/evaluation instance for a single user."""

    history_items: list
    history_times: list
    history_mask: list
    target_item: int
    target_time: float
    user_id: str

    def check(self, max_len: int) -> None:
        assert len(self.history_items) == max_len
        assert len(self.history_times) == max_len
        assert len(self.history_mask) == max_len
        real = [i for i, m in zip(self.history_items, self.history_mask) if m]
        padded = [i for i, m in zip(self.history_items, self.history_mask) if not m]
        assert all(i != PAD_INDEX for i in real)
        assert all(i == PAD_INDEX for i in padded)
        times = [t for t, m in zip(self.history_times, self.history_mask) if m]
        assert all(0.0 <= t <= 1.0 for t in times)
        assert all(a <= b for a, b in zip(times, times[1:]))
        if times:
            assert self.target_time >= times[-1]
        assert self.target_item != PAD_INDEX


@dataclass
class SplitBundle:
    train: list
    valid: list
    test: list
    split_kind: str  # "loo" | "temporal"
    seed: int = 0

    def all_samples(self) -> list:
        return [*self.train, *self.valid, *self.test]


def load_events(
    path: str,
    format: str = "csv",
    header: bool = False,
    user_col: int = 0,
    item_col: int = 1,
    time_col: int = 2,
    strict: bool = False,
) -> LoadResult:
    """Parse a delimited interaction log into RawEvents, preserving file order.

    Malformed rows are skipped with a warning (or fatal when strict=True).
    """
    delim = "\t" if format == "tsv" else ","
    events = []
    rows_read = 0
    skipped = 0
    needed = max(user_col, item_col, time_col) + 1
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh, delimiter=delim)
        for lineno, row in enumerate(reader, start=1):
            if header and lineno == 1:
                continue
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            rows_read += 1
            try:
                if len(row) < needed:
                    raise ValueError(f"expected >= {needed} columns, got {len(row)}")
                ts_text = row[time_col].strip()
                ts_value = float(ts_text)
                if ts_value != int(ts_value):
                    raise ValueError(f"non-integer timestamp {ts_text!r}")
                event = RawEvent(row[user_col].strip(), row[item_col].strip(), int(ts_value))
            except (ValueError, DataError, IndexError) as exc:
                if strict:
                    raise DataError(f"{path}:{lineno}: malformed row: {exc}") from exc
                skipped += 1
                logger.warning("%s:%d: skipping malformed row (%s)", path, lineno, exc)
                continue
            events.append(event)
    logger.info("loaded %d events from %s (%d rows read, %d skipped)", len(events), path, rows_read, skipped)
    return LoadResult(tuple(events), rows_read, skipped)


def filter_core(events: Sequence[RawEvent], min_count: int) -> list:
    """Iteratively drop users and items with < min_count events until stable.

    Output is grouped per user (first-appearance order) and chronological within
    each user; ties keep input order.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    kept = list(events)
    while True:
        user_counts: dict[str, int] = {}
        item_counts: dict[str, int] = {}
        for ev in kept:
            user_counts[ev.user_id] = user_counts.get(ev.user_id, 0) + 1
            item_counts[ev.item_id] = item_counts.get(ev.item_id, 0) + 1
        survivors = [
            ev
            for ev in kept
            if user_counts[ev.user_id] >= min_count and item_counts[ev.item_id] >= min_count
        ]
        if len(survivors) == len(kept):
            break
        kept = survivors
    if not kept:
        raise DegenerateDatasetError(
            f"dataset degenerate: no events survive min_count={min_count} filtering"
        )
    grouped = group_by_user(kept)
    out: list[RawEvent] = []
    for evs in grouped.values():
        out.extend(evs)
    return out


def group_by_user(events: Iterable[RawEvent]) -> dict:
    """User -> chronologically sorted events (stable on timestamp ties)."""
    grouped: dict[str, list[RawEvent]] = {}
    for ev in events:
        grouped.setdefault(ev.user_id, []).append(ev)
    for user, evs in grouped.items():
        grouped[user] = sorted(evs, key=lambda e: e.timestamp)
    return grouped


def normalize_times(events_by_user: dict) -> dict:
    """Day-level normalized times in [0, 1], shared min/max across the dataset."""
    if not events_by_user:
        return {}
    days_by_user = {
        user: [ev.timestamp // SECONDS_PER_DAY for ev in evs]
        for user, evs in events_by_user.items()
    }
    all_days = [d for days in days_by_user.values() for d in days]
    lo = min(all_days)
    span = max(all_days) - lo
    out = {}
    for user, days in days_by_user.items():
        if span == 0:
            out[user] = [0.0 for _ in days]
        else:
            out[user] = [(d - lo) / span for d in days]
    return out


def build_vocab(events_by_user: dict) -> Vocab:
    """Indices 1..|V| assigned in first-appearance order over the grouped events."""
    seen: dict[str, None] = {}
    for evs in events_by_user.values():
        for ev in evs:
            seen.setdefault(ev.item_id, None)
    return Vocab(tuple(seen.keys()))


def build_sequences(
    events_by_user: dict,
    times_by_user: dict,
    vocab: Vocab,
    max_len: int,
) -> list:
    """Every next-item position of every user becomes one left-padded sample.

    For a user with events v_1..v_n, positions 2..n yield samples whose history
    is the last min(pos-1, max_len) preceding items. Users with fewer than two
    events are skipped. Samples are emitted per user in position order, which
    downstream LOO splitting relies on.
    """
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    samples = []
    for user, evs in events_by_user.items():
        if len(evs) < 2:
            logger.warning("user %s has < 2 events after filtering; skipped", user)
            continue
        times = times_by_user[user]
        indices = [vocab.index(ev.item_id) for ev in evs]
        for pos in range(1, len(evs)):  # target at position pos (0-based)
            start = max(0, pos - max_len)
            hist_items = indices[start:pos]
            hist_times = times[start:pos]
            pad = max_len - len(hist_items)
            samples.append(
                SequenceSample(
                    history_items=[PAD_INDEX] * pad + hist_items,
                    history_times=[0.0] * pad + hist_times,
                    history_mask=[False] * pad + [True] * len(hist_items),
                    target_item=indices[pos],
                    target_time=times[pos],
                    user_id=user,
                )
            )
    return samples


def split(samples: Sequence[SequenceSample], kind: str, seed: int = 0) -> SplitBundle:
    """Leave-one-out per user, or a seeded sample-level 8:1:1 partition."""
    if not samples:
        raise DataError("cannot split an empty sample list")
    if kind == "loo":
        per_user: dict[str, list[SequenceSample]] = {}
        for s in samples:
            per_user.setdefault(s.user_id, []).append(s)
        train, valid, test = [], [], []
        for user, user_samples in per_user.items():
            test.append(user_samples[-1])
            if len(user_samples) >= 2:
                valid.append(user_samples[-2])
            train.extend(user_samples[:-2])
        return SplitBundle(train, valid, test, "loo", seed)
    if kind == "temporal":
        order = list(range(len(samples)))
        random.Random(seed).shuffle(order)
        shuffled = [samples[i] for i in order]
        n = len(shuffled)
        n_valid = n // 10
        n_test = n // 10
        n_train = n - n_valid - n_test
        return SplitBundle(
            shuffled[:n_train],
            shuffled[n_train : n_train + n_valid],
            shuffled[n_train + n_valid :],
            "temporal",
            seed,
        )
    raise DataError(f"unknown split kind {kind!r}")


def dataset_stats(events_by_user: dict, vocab: Vocab) -> dict:
    """Sequence/item/action counts, average length, and sparsity percentage."""
    n_users = len(events_by_user)
    n_actions = sum(len(evs) for evs in events_by_user.values())
    n_items = vocab.size
    avg_len = n_actions / n_users if n_users else 0.0
    sparsity = 1.0 - n_actions / (n_users * n_items) if n_users and n_items else 0.0
    return {
        "sequences": n_users,
        "items": n_items,
        "actions": n_actions,
        "avg_len": round(avg_len, 2),
        "sparsity_pct": round(100.0 * sparsity, 2),
    }


def prepare_dataset(
    events: Sequence[RawEvent],
    min_count: int,
    max_len: int,
    split_kind: str,
    seed: int = 0,
) -> tuple:
    """Full pipeline from raw events to (SplitBundle, Vocab, stats)."""
    filtered = filter_core(events, min_count)
    grouped = group_by_user(filtered)
    times = normalize_times(grouped)
    vocab = build_vocab(grouped)
    samples = build_sequences(grouped, times, vocab, max_len)
    if not samples:
        raise DegenerateDatasetError("dataset degenerate: no users with >= 2 events")
    bundle = split(samples, split_kind, seed)
    stats = dataset_stats(grouped, vocab)
    return bundle, vocab, stats


# --- snapshot serialization -------------------------------------------------

SNAPSHOT_VERSION = 1


def _sample_to_list(s: SequenceSample) -> list:
    return [
        s.history_items,
        s.history_times,
        [int(m) for m in s.history_mask],
        s.target_item,
        s.target_time,
        s.user_id,
    ]


def _sample_from_list(row: list) -> SequenceSample:
    items, times, mask, target, ttime, user = row
    return SequenceSample(
        history_items=list(items),
        history_times=[float(t) for t in times],
        history_mask=[bool(m) for m in mask],
        target_item=int(target),
        target_time=float(ttime),
        user_id=user,
    )


def save_snapshot(path: str, bundle: SplitBundle, vocab: Vocab, stats: dict, meta: dict) -> None:
    """Gzipped JSON snapshot; byte-identical for identical inputs (mtime pinned)."""
    payload = {
        "version": SNAPSHOT_VERSION,
        "split_kind": bundle.split_kind,
        "seed": bundle.seed,
        "vocab": list(vocab.items),
        "stats": stats,
        "meta": meta,
        "samples": {
            part: [_sample_to_list(s) for s in getattr(bundle, part)]
            for part in ("train", "valid", "test")
        },
    }
    raw = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        # empty filename + pinned mtime keep the archive byte-identical
        with gzip.GzipFile(filename="", fileobj=fh, mode="wb", mtime=0) as gz:
            gz.write(raw)


def load_snapshot(path: str) -> tuple:
    """Returns (SplitBundle, Vocab, stats, meta)."""
    try:
        with gzip.open(path, "rb") as gz:
            payload = json.loads(gz.read().decode("utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read snapshot {path}: {exc}") from exc
    if payload.get("version") != SNAPSHOT_VERSION:
        raise DataError(f"unsupported snapshot version {payload.get('version')!r}")
    bundle = SplitBundle(
        [_sample_from_list(r) for r in payload["samples"]["train"]],
        [_sample_from_list(r) for r in payload["samples"]["valid"]],
        [_sample_from_list(r) for r in payload["samples"]["test"]],
        payload["split_kind"],
        payload["seed"],
    )
    return bundle, Vocab(tuple(payload["vocab"])), payload["stats"], payload["meta"]
