"""End-to-end acceptance checks.

Each test covers one headline behavior at its stated tolerance and prints a
single PASS line (visible with ``pytest -s``); a failing assertion is the
corresponding FAIL.
"""

import csv
import time

import numpy as np
import pytest

from offsim import cache, cli, pipeline as pl, profiles, reference as ref
from offsim import scenario as sc, trace as tr
from offsim.costmodel import TransferModel, effective_token_width, transfer_time


# ---------------------------------------------------------------------------
# 1. consecutive-step similarity matches a set-arithmetic oracle
# ---------------------------------------------------------------------------

def test_01_similarity_oracle_equivalence():
    start = time.monotonic()
    rng = np.random.default_rng(1)
    checked = 0
    for _ in range(1000):
        layers = int(rng.integers(1, 3))
        steps = int(rng.integers(2, 6))
        k = int(rng.integers(1, 17))
        universe = 64
        step_objs = []
        for _ in range(steps):
            arrs = [np.sort(rng.choice(universe, size=k, replace=False)).astype(np.uint32)
                    for _ in range(layers)]
            step_objs.append(tr.StepAccess(layers=arrs, tokens_accepted=0))
        trace = tr.AccessTrace(num_layers=layers, context_len=universe, topk=k,
                               steps=step_objs)
        for layer in range(layers):
            got = tr.intra_layer_similarity(trace, layer)
            for t in range(1, steps):
                prev = set(int(x) for x in trace.steps[t - 1].layers[layer])
                cur = set(int(x) for x in trace.steps[t].layers[layer])
                want = len(prev & cur) / len(cur)
                assert got[t - 1] == pytest.approx(want, abs=1e-12)
                checked += 1
    elapsed = time.monotonic() - start
    assert elapsed < 5.0
    print(f"ACCEPTANCE 1 PASS: similarity matches set oracle on 1000 traces "
          f"({checked} comparisons, {elapsed:.2f}s)")


# ---------------------------------------------------------------------------
# 2. LRU pool matches a linear-scan oracle
# ---------------------------------------------------------------------------

class _LinearLRU:
    def __init__(self, capacity):
        self.capacity = capacity
        self.order = []

    def access(self, requested):
        hits = [x for x in requested if x in self.order]
        misses = [x for x in requested if x not in self.order]
        if len(requested) > self.capacity:
            keep = requested[-self.capacity:]
            self.order = [x for x in self.order if x in keep]
            for x in keep:
                if x in self.order:
                    self.order.remove(x)
                self.order.append(x)
            return len(misses)
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


def test_02_lru_oracle_equivalence():
    start = time.monotonic()
    rng = np.random.default_rng(2)
    for _ in range(1000):
        cap = int(rng.integers(1, 65))
        pool = cache.SparsePool(cap)
        oracle = _LinearLRU(cap)
        next_gen = 1000
        for step in range(int(rng.integers(1, 12))):
            size = int(rng.integers(1, 33))
            req = [int(x) for x in rng.choice(128, size=size, replace=False)]
            assert pool.access_step(req).h2d_blocks == oracle.access(req)
            assert pool.lru_order() == oracle.order
            if rng.random() < 0.3:
                new = list(range(next_gen, next_gen + int(rng.integers(1, 4))))
                next_gen = new[-1] + 1
                cap += len(new)
                pool.grow_capacity(cap)
                oracle.capacity = cap
                assert pool.append_generated(new) == len(new)
                oracle.append(new)
                assert pool.lru_order() == oracle.order
    elapsed = time.monotonic() - start
    assert elapsed < 10.0
    print(f"ACCEPTANCE 2 PASS: pool matches linear-scan LRU oracle on 1000 "
          f"random workloads ({elapsed:.2f}s)")


# ---------------------------------------------------------------------------
# 3. prefill warm-up reduces early decode misses
# ---------------------------------------------------------------------------

def test_03_warmup_effect():
    start = time.monotonic()
    total, strict = 0, 0
    for seed in range(50):
        trace = tr.generate_trace(tr.TraceGenParams(
            num_layers=1, context_len=1024, topk=128, num_steps=12,
            target_similarity=0.85, seed=seed))
        warm = cache.replay(trace, 0.2, use_warmup=True).misses[:, :10].sum()
        cold = cache.replay(trace, 0.2, use_warmup=False).misses[:, :10].sum()
        assert warm <= cold, f"seed {seed}: warm-up increased misses"
        total += 1
        strict += int(warm < cold)
    elapsed = time.monotonic() - start
    assert strict / total >= 0.9
    assert elapsed < 30.0
    print(f"ACCEPTANCE 3 PASS: warm-up never hurts and strictly helps on "
          f"{strict}/{total} seeds ({elapsed:.2f}s)")


# ---------------------------------------------------------------------------
# 4. misses shrink monotonically with residency ratio, vanishing at full
# ---------------------------------------------------------------------------

def test_04_miss_vs_ratio_monotone():
    start = time.monotonic()
    trace = tr.generate_trace(tr.TraceGenParams(
        num_layers=2, context_len=1024, topk=128, num_steps=20,
        target_similarity=0.9, seed=4))
    ratios = (0.1, 0.2, 0.4, 0.6, 1.0)
    totals = [cache.replay(trace, rho).total_misses() for rho in ratios]
    assert totals == sorted(totals, reverse=True), f"not monotone: {totals}"
    full = cache.replay(trace, 1.0, preload_full_history=True).total_misses()
    assert full == 0
    elapsed = time.monotonic() - start
    assert elapsed < 30.0
    print(f"ACCEPTANCE 4 PASS: misses {totals} non-increasing over ratios "
          f"{ratios}; zero at full residency with a warm start ({elapsed:.2f}s)")


# ---------------------------------------------------------------------------
# 5. reference-table arithmetic: aggregation identity and improvement ratios
# ---------------------------------------------------------------------------

def test_05_reference_arithmetic():
    rows = ref.load_reference_table()
    report = ref.validate_reference(rows)
    assert report.replication == 8
    for finding in report.rows:
        r = finding.row
        if (r.context, r.batch) == (131072, 13):
            assert finding.flagged  # known inconsistent row
        else:
            assert abs(finding.residual) <= 0.005, \
                f"batch {r.batch} ctx {r.context}: residual {finding.residual:+.4%}"
    by_label = {imp.label: imp.percent for imp in report.improvements}
    assert by_label["mtp=2 context=32768 accept=1.7"] == pytest.approx(69.4, abs=0.1)
    assert by_label["mtp=4 context=32768 accept=3.4"] == pytest.approx(45.8, abs=0.1)
    assert by_label["mtp=2 context=131072 accept=1.7"] == pytest.approx(122.7, abs=0.1)
    print("ACCEPTANCE 5 PASS: replication 8 holds within 0.5% on 17/18 rows "
          "(one flagged); improvements 69.4/45.8/122.7% within 0.1 pp")


# ---------------------------------------------------------------------------
# 6. memory model reproduces every published (ratio, batch) pair within 6%
# ---------------------------------------------------------------------------

def test_06_memory_model_batches():
    model = sc.ModelSpec()
    hw = sc.HardwareSpec(gpu_mem_bytes=sc.calibrated_gpu_mem_bytes(model))
    pairs = [(32768, 1.0, 52), (32768, 0.82, 64), (32768, 0.48, 96),
             (32768, 0.31, 128), (32768, 0.21, 160),
             (131072, 1.0, 13), (131072, 0.2, 40), (131072, 0.1, 54)]
    worst = 0.0
    for context, rho, published in pairs:
        got = sc.max_batch_size(model, hw, context, rho)
        err = abs(got - published) / published
        worst = max(worst, err)
        assert err <= 0.06, f"ctx {context} rho {rho}: batch {got} vs {published}"
    print(f"ACCEPTANCE 6 PASS: all 8 published batch sizes reproduced within "
          f"6% (worst {worst:.1%})")


# ---------------------------------------------------------------------------
# 7. overlap-strategy crossover at long context
# ---------------------------------------------------------------------------

def _long_context_inputs():
    model = sc.ModelSpec()
    hw = sc.HardwareSpec(gpu_mem_bytes=1e15)
    deploy = sc.DeploymentSpec(context_len=131072, batch_size=160,
                               sparse_ratio=0.2, tbo_enabled=False)
    scenario = sc.Scenario(model=model, hw=hw, deploy=deploy)
    table = profiles.long_context_study_profile()
    transfer = TransferModel(mode="batched")
    return lambda miss: pl.layer_cost_inputs(scenario, table, transfer, float(miss))


def test_07_overlap_crossover():
    cost_inputs = _long_context_inputs()
    c = cost_inputs(512)
    lat = {"none": pl.layer_time_none(c).layer_latency,
           "da": pl.layer_time_da(c).layer_latency,
           "dba": pl.layer_time_dba(c).layer_latency}
    assert lat["dba"] < lat["da"] < lat["none"], lat
    for miss in (0, 8, 16, 32):
        low = cost_inputs(miss)
        assert pl.layer_time_da(low).layer_latency \
            <= pl.layer_time_dba(low).layer_latency, f"miss {miss}"
    grid = range(0, 2049, 32)
    threshold = pl.find_dba_crossover(cost_inputs, grid)
    assert threshold is not None and 32 < threshold <= 512
    print(f"ACCEPTANCE 7 PASS: at miss 512 dba {lat['dba']:.0f} < da "
          f"{lat['da']:.0f} < none {lat['none']:.0f} us; da wins at miss <= 32; "
          f"dba crossover threshold {threshold:.0f} misses/request")


# ---------------------------------------------------------------------------
# 8. calibrated fit extrapolates across the speculation width
# ---------------------------------------------------------------------------

def test_08_calibration_extrapolation():
    fit = profiles.calibrated_profile(mtp=2, context=32768).fit
    rows = ref.load_reference_table()
    anchor2 = next(r for r in rows
                   if (r.mtp, r.context, r.sparse_ratio) == (2, 32768, 1.0))
    pred2 = fit.predict_t_iter_us(anchor2.batch, 1.0, 2)
    assert pred2 == pytest.approx(anchor2.t_iter_us, rel=0.01)  # ~73.3 ms
    anchors4 = [r for r in rows
                if (r.mtp, r.context, r.sparse_ratio) == (4, 32768, 1.0)]
    for r in anchors4:
        pred4 = fit.predict_t_iter_us(r.batch, 1.0, 4)
        assert pred4 == pytest.approx(r.t_iter_us, rel=0.01)  # ~95.7 ms
    worst = 0.0
    holdout = [r for r in rows if r.mtp == 4 and r.context == 32768]
    assert holdout
    for r in holdout:
        pred = fit.predict_otps(r.batch, r.sparse_ratio, 4, r.accept_ratio)
        err = abs(pred - r.otps) / r.otps
        worst = max(worst, err)
        assert err <= 0.10, f"batch {r.batch} rho {r.sparse_ratio}: {err:.1%}"
    print(f"ACCEPTANCE 8 PASS: anchor latencies within 1% "
          f"({pred2 / 1e3:.1f} ms vs {anchor2.t_iter_us / 1e3:.1f} ms); "
          f"width-4 holdout OTPS within 10% (worst {worst:.2%})")


# ---------------------------------------------------------------------------
# 9. timeline algebra matches a longest-path oracle exactly
# ---------------------------------------------------------------------------

def _longest_path(timing):
    spans = {s.name: s for s in timing.spans}
    finish: dict[str, float] = {}

    def end(name):
        if name not in finish:
            s = spans[name]
            finish[name] = max((end(d) for d in s.deps), default=0.0) + s.duration
        return finish[name]

    return max(end(name) for name in spans)


def test_09_timeline_conservation():
    rng = np.random.default_rng(9)
    strategies = (pl.layer_time_none, pl.layer_time_da, pl.layer_time_dba)
    for fn in strategies:
        for _ in range(10_000):
            c = pl.LayerCostInputs(
                indexer_us=float(rng.uniform(0.1, 2000)),
                pre_attn_us=float(rng.uniform(0.1, 2000)),
                attn_us=float(rng.uniform(0.1, 5000)),
                merge_us=float(rng.uniform(0, 100)),
                h2d_us=float(rng.uniform(0, 5000)),
                d2h_us=float(rng.uniform(0, 1000)),
                miss_fraction=float(rng.uniform(0, 1)),
                duplex=bool(rng.integers(0, 2)))
            t = fn(c)
            assert t.layer_latency == _longest_path(t)  # exact, no tolerance
            for span in t.spans:
                assert span.end >= span.start
    print("ACCEPTANCE 9 PASS: span latency equals the longest dependency path "
          "exactly on 10000 random inputs per strategy")


# ---------------------------------------------------------------------------
# 10. transfer-model constants
# ---------------------------------------------------------------------------

def test_10_transfer_constants():
    batched = TransferModel(mode="batched")
    t_2048 = transfer_time(batched, 2048, "h2d")
    assert t_2048 == pytest.approx(36.3, abs=0.1)
    per_call = TransferModel(mode="per_call")
    effs = {}
    for direction, target in (("h2d", 0.79), ("d2h", 0.23)):
        t_us = transfer_time(per_call, 1000, direction)
        effs[direction] = 1000 * 656 / (t_us * 1e3)
        assert effs[direction] == pytest.approx(target, rel=0.01)
    print(f"ACCEPTANCE 10 PASS: batched 2048-block prefetch {t_2048:.2f} us; "
          f"per-call effective bandwidths {effs['h2d']:.3f}/{effs['d2h']:.3f} GB/s")


# ---------------------------------------------------------------------------
# 11. sweep outputs are byte-identical across runs
# ---------------------------------------------------------------------------

def test_11_sweep_determinism(tmp_path):
    cfg = tmp_path / "scenario.toml"
    cfg.write_text("[model]\nnum_layers = 4\ntopk = 64\n\n"
                   "[deploy]\ncontext_len = 2048\nbatch_size = 2\n")
    args = ["sweep", "--config", str(cfg), "--batch-list", "1,2",
            "--ratio-list", "0.5,1.0", "--gen-steps", "8",
            "--trace-layers", "4"]
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert cli.main(args + ["--out", str(out_a)]) == 0
    assert cli.main(args + ["--out", str(out_b)]) == 0
    names = ("report.csv", "throughput_vs_batch.csv", "miss_vs_ratio.csv",
             "warmup_effect.csv")
    for name in names:
        assert (out_a / name).read_bytes() == (out_b / name).read_bytes(), name
    print(f"ACCEPTANCE 11 PASS: {len(names)} sweep outputs byte-identical "
          f"across repeated runs")
