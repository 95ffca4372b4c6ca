"""GPU-side sparse memory pool: per-layer LRU admission/eviction over latent entry IDs.

One pool models the resident latent subset of a single (request, layer).
Replay drives a pool per layer through a trace and produces the per-step miss
profile that the pipeline turns into transfer volumes.
"""

from __future__ import annotations

import csv
import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .trace import AccessTrace


@dataclass
class AccessResult:
    hit_ids: list[int]
    miss_ids: list[int]
    evicted_ids: list[int]
    h2d_blocks: int
    d2h_blocks: int = 0


class SparsePool:
    """LRU-ordered set of resident entry IDs with a hard slot capacity.

    Recency is the insertion order of an OrderedDict: least-recent first.
    Capacity may only grow (the pool tracks a growing decode history).
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._resident: OrderedDict[int, None] = OrderedDict()
        self.hits = 0
        self.misses = 0
        self.evictions = 0
        self._append_watermark = -1

    def __len__(self) -> int:
        return len(self._resident)

    def __contains__(self, entry_id: int) -> bool:
        return entry_id in self._resident

    def resident_ids(self) -> list[int]:
        return sorted(self._resident)

    def lru_order(self) -> list[int]:
        """Resident IDs from least- to most-recently used."""
        return list(self._resident)

    def grow_capacity(self, capacity: int) -> None:
        if capacity < self.capacity:
            raise ValueError("capacity may only grow")
        self.capacity = capacity

    def _touch(self, entry_id: int) -> None:
        self._resident[entry_id] = None
        self._resident.move_to_end(entry_id)

    def _evict_lru(self) -> int:
        victim, _ = self._resident.popitem(last=False)
        self.evictions += 1
        return victim

    def warmup(self, prefill_windows) -> int:
        """Insert window selections oldest-first; duplicates refresh recency only.

        Warm-up movement is charged to the prefill/decode handoff, so no
        hit/miss/transfer stats are recorded here.
        """
        inserted = 0
        for window in prefill_windows:
            for entry_id in window:
                entry_id = int(entry_id)
                if entry_id not in self._resident:
                    inserted += 1
                self._touch(entry_id)
                while len(self._resident) > self.capacity:
                    self._resident.popitem(last=False)
        return inserted

    def access_step(self, requested) -> AccessResult:
        """Serve one selection set: refresh hits, admit misses, evict LRU as needed.

        When the request exceeds capacity (tiny-ratio degenerate case) only the
        most-recent-position IDs are retained; the remainder transfer but are
        never admitted.
        """
        requested = [int(x) for x in requested]
        hit_ids = [x for x in requested if x in self._resident]
        miss_ids = [x for x in requested if x not in self._resident]
        self.hits += len(hit_ids)
        self.misses += len(miss_ids)
        evicted: list[int] = []
        if len(requested) > self.capacity:
            keep = set(requested[-self.capacity:])
            for x in list(self._resident):
                if x not in keep:
                    del self._resident[x]
                    self.evictions += 1
                    evicted.append(x)
            for x in requested[-self.capacity:]:
                self._touch(x)
        else:
            for x in hit_ids:
                self._touch(x)
            for x in miss_ids:
                if len(self._resident) >= self.capacity:
                    evicted.append(self._evict_lru())
                self._touch(x)
        return AccessResult(hit_ids=hit_ids, miss_ids=miss_ids,
                            evicted_ids=sorted(evicted), h2d_blocks=len(miss_ids))

    def append_generated(self, new_ids) -> int:
        """Admit newly generated entries at top recency; each is written back to
        host exactly once, so the return value is the step's D2H block count."""
        new_ids = [int(x) for x in new_ids]
        for x in new_ids:
            if x in self._resident or x <= self._append_watermark:
                raise ValueError(f"duplicate generated entry id {x}")
        for x in new_ids:
            if len(self._resident) >= self.capacity:
                self._evict_lru()
            self._touch(x)
            self._append_watermark = max(self._append_watermark, x)
        return len(new_ids)


def pool_capacity(sparse_ratio: float, history_len: int) -> int:
    return max(1, math.floor(sparse_ratio * history_len))


@dataclass
class MissProfile:
    """Per-layer, per-step miss counts from a single-request replay."""

    misses: np.ndarray  # shape (num_layers, num_steps)
    sparse_ratio: float

    @property
    def num_layers(self) -> int:
        return self.misses.shape[0]

    @property
    def num_steps(self) -> int:
        return self.misses.shape[1]

    def layer_means(self) -> np.ndarray:
        return self.misses.mean(axis=1)

    def mean_misses(self) -> float:
        return float(self.misses.mean())

    def total_misses(self) -> int:
        return int(self.misses.sum())


def replay(trace: AccessTrace, sparse_ratio: float, use_warmup: bool = True,
           preload_full_history: bool = False) -> MissProfile:
    """Replay a trace through one LRU pool per layer and record every step's misses.

    Pool capacity is the sparse ratio times the current history length, so a
    ratio of 1 with the full history preloaded misses nothing.  ``use_warmup``
    seeds each pool from the trace's prefill windows (stat-free).
    """
    if not (0.0 < sparse_ratio <= 1.0):
        raise ValueError(f"sparse_ratio must be in (0, 1], got {sparse_ratio}")
    pools = [SparsePool(pool_capacity(sparse_ratio, trace.context_len))
             for _ in range(trace.num_layers)]
    if preload_full_history:
        full = [np.arange(trace.context_len, dtype=np.uint32)]
        for pool in pools:
            pool.warmup(full)
    elif use_warmup and trace.prefill_windows is not None:
        for layer, pool in enumerate(pools):
            pool.warmup(trace.prefill_windows[layer])

    misses = np.zeros((trace.num_layers, trace.num_steps), dtype=np.int64)
    history = trace.context_len
    for t, step in enumerate(trace.steps):
        for layer, pool in enumerate(pools):
            misses[layer, t] = pool.access_step(step.layers[layer]).h2d_blocks
        new_ids = range(history, history + step.tokens_accepted)
        history += step.tokens_accepted
        for pool in pools:
            pool.grow_capacity(pool_capacity(sparse_ratio, history))
            pool.append_generated(new_ids)
    return MissProfile(misses=misses, sparse_ratio=sparse_ratio)


def write_miss_profile_csv(profile: MissProfile, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer", "step", "misses"])
        for layer in range(profile.num_layers):
            for step in range(profile.num_steps):
                w.writerow([layer, step, int(profile.misses[layer, step])])


def write_miss_summary_csv(profile: MissProfile, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer", "mean_misses", "min", "max"])
        for layer in range(profile.num_layers):
            row = profile.misses[layer]
            w.writerow([layer, f"{row.mean():.6f}", int(row.min()), int(row.max())])


def read_miss_profile_csv(path) -> MissProfile:
    rows = []
    with open(path, newline="") as f:
        for rec in csv.DictReader(f):
            rows.append((int(rec["layer"]), int(rec["step"]), int(rec["misses"])))
    if not rows:
        raise ValueError(f"empty miss profile: {path}")
    num_layers = max(r[0] for r in rows) + 1
    num_steps = max(r[1] for r in rows) + 1
    misses = np.zeros((num_layers, num_steps), dtype=np.int64)
    for layer, step, m in rows:
        misses[layer, step] = m
    return MissProfile(misses=misses, sparse_ratio=float("nan"))
