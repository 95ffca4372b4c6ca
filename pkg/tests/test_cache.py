import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from offsim import cache, trace as tr


class ListLRU:
    """Independent linear-scan reference: most-recent at the list tail."""

    def __init__(self, capacity):
        self.capacity = capacity
        self.order = []
        self.misses = 0

    def access(self, requested):
        requested = list(requested)
        hits = [x for x in requested if x in self.order]
        misses = [x for x in requested if x not in self.order]
        self.misses += len(misses)
        if len(requested) > self.capacity:
            keep = requested[-self.capacity:]
            self.order = [x for x in self.order if x in keep]
            for x in keep:
                if x in self.order:
                    self.order.remove(x)
                self.order.append(x)
            return len(misses)
        # hits refresh recency before any miss is admitted
        for x in hits:
            self.order.remove(x)
            self.order.append(x)
        for x in misses:
            if len(self.order) >= self.capacity:
                self.order.pop(0)
            self.order.append(x)
        return len(misses)

    def append(self, new_ids):
        for x in new_ids:
            if len(self.order) >= self.capacity:
                self.order.pop(0)
            self.order.append(x)


def test_access_step_hand_example():
    pool = cache.SparsePool(4)
    r1 = pool.access_step([1, 2, 3, 4])
    assert r1.miss_ids == [1, 2, 3, 4] and r1.h2d_blocks == 4
    r2 = pool.access_step([3, 4, 5])
    assert r2.hit_ids == [3, 4]
    assert r2.miss_ids == [5]
    assert r2.evicted_ids == [1]  # 1 is least recently used
    assert pool.resident_ids() == [2, 3, 4, 5]
    assert pool.lru_order() == [2, 3, 4, 5]


def test_hits_refresh_recency():
    pool = cache.SparsePool(3)
    pool.access_step([1, 2, 3])
    pool.access_step([1])  # 1 becomes most recent; 2 is now LRU
    r = pool.access_step([4])
    assert r.evicted_ids == [2]
    assert pool.lru_order() == [3, 1, 4]


def test_oversized_request_keeps_tail():
    pool = cache.SparsePool(2)
    r = pool.access_step([10, 11, 12, 13])
    assert r.h2d_blocks == 4  # all transfer even though only 2 are admitted
    assert pool.resident_ids() == [12, 13]


def test_warmup_hand_example():
    pool = cache.SparsePool(4)
    inserted = pool.warmup([[1, 2, 3], [2, 4, 5]])
    assert inserted == 5
    # capacity 4: oldest unique id (1) fell off; 2 was refreshed by window 2
    assert pool.resident_ids() == [2, 3, 4, 5]
    assert pool.lru_order() == [3, 2, 4, 5]
    assert pool.misses == 0  # warm-up records no stats


def test_append_generated_and_watermark():
    pool = cache.SparsePool(3)
    pool.access_step([0, 1])
    assert pool.append_generated([100, 101]) == 2
    assert pool.resident_ids() == [1, 100, 101]  # 0 evicted
    with pytest.raises(ValueError, match="duplicate"):
        pool.append_generated([101])
    with pytest.raises(ValueError, match="duplicate"):
        pool.append_generated([50])  # below watermark


def test_capacity_rules():
    with pytest.raises(ValueError):
        cache.SparsePool(0)
    pool = cache.SparsePool(2)
    pool.grow_capacity(5)
    with pytest.raises(ValueError, match="only grow"):
        pool.grow_capacity(3)
    assert cache.pool_capacity(0.5, 100) == 50
    assert cache.pool_capacity(0.001, 100) == 1  # never below one slot


@settings(max_examples=200, deadline=None)
@given(
    cap=st.integers(min_value=1, max_value=20),
    steps=st.lists(st.lists(st.integers(min_value=0, max_value=40),
                            min_size=1, max_size=25, unique=True),
                   min_size=1, max_size=15),
)
def test_lru_matches_linear_scan_oracle(cap, steps):
    pool = cache.SparsePool(cap)
    oracle = ListLRU(cap)
    for req in steps:
        got = pool.access_step(req).h2d_blocks
        want = oracle.access(req)
        assert got == want
        assert pool.lru_order() == oracle.order
    assert pool.misses == oracle.misses


def small_trace(seed=0, steps=20, similarity=0.9):
    return tr.generate_trace(tr.TraceGenParams(
        num_layers=2, context_len=1024, topk=128, num_steps=steps,
        target_similarity=similarity, seed=seed))


def test_replay_zero_misses_at_full_ratio_preloaded():
    trace = small_trace()
    profile = cache.replay(trace, 1.0, preload_full_history=True)
    assert profile.total_misses() == 0


def test_replay_monotone_in_ratio():
    trace = small_trace()
    totals = [cache.replay(trace, rho).total_misses()
              for rho in (0.1, 0.2, 0.4, 0.6, 1.0)]
    assert totals == sorted(totals, reverse=True)


def test_replay_warmup_cuts_early_misses():
    trace = small_trace()
    warm = cache.replay(trace, 0.2, use_warmup=True)
    cold = cache.replay(trace, 0.2, use_warmup=False)
    early = slice(0, 10)
    assert warm.misses[:, early].sum() < cold.misses[:, early].sum()


def test_replay_shapes_and_stats():
    trace = small_trace(steps=12)
    profile = cache.replay(trace, 0.3)
    assert profile.misses.shape == (2, 12)
    assert profile.num_layers == 2 and profile.num_steps == 12
    assert profile.mean_misses() == pytest.approx(profile.misses.mean())
    assert profile.layer_means().shape == (2,)


def test_replay_rejects_bad_ratio():
    trace = small_trace(steps=3)
    with pytest.raises(ValueError):
        cache.replay(trace, 0.0)


def test_miss_profile_csv_roundtrip(tmp_path):
    trace = small_trace(steps=8)
    profile = cache.replay(trace, 0.25)
    path = tmp_path / "miss.csv"
    cache.write_miss_profile_csv(profile, path)
    back = cache.read_miss_profile_csv(path)
    np.testing.assert_array_equal(back.misses, profile.misses)
    cache.write_miss_summary_csv(profile, tmp_path / "summary.csv")
    header = (tmp_path / "summary.csv").read_text().splitlines()[0]
    assert header == "layer,mean_misses,min,max"


def test_miss_profile_csv_empty(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("layer,step,misses\n")
    with pytest.raises(ValueError, match="empty"):
        cache.read_miss_profile_csv(path)
