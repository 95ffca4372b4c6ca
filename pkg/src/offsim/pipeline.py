"""Iteration timeline composition under the overlap strategies.

Each layer's attention path is a small span DAG; a span starts at the latest
end of its dependencies.  Strategy ``none`` serializes transfers between the
indexer and attention, ``da`` hides them under deferred PreAttn plus the
resident-entry attention stage, and ``dba`` additionally splits the indexer
along the batch dimension so half of its compute joins the overlap window.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .cache import MissProfile, replay
from .costmodel import CostTable, TransferModel, effective_token_width, op_time, transfer_time
from .scenario import Scenario
from .trace import AccessTrace

DEFAULT_DBA_SPLIT = 0.5
DEFAULT_DBA_ETA = 1.15
DEFAULT_TBO_SPLIT_OVERHEAD = 0.03

STRATEGY_TAGS = ("none", "da", "dba")


@dataclass(frozen=True)
class OverlapStrategy:
    tag: str
    split_fraction: float = DEFAULT_DBA_SPLIT
    eta: float = DEFAULT_DBA_ETA

    def __post_init__(self):
        if self.tag not in STRATEGY_TAGS:
            raise ValueError(f"unknown strategy tag {self.tag!r}")
        if not (0.0 < self.split_fraction < 1.0):
            raise ValueError("split_fraction must be in (0, 1)")
        if self.eta < 1.0:
            raise ValueError("eta must be >= 1")


@dataclass
class Span:
    name: str
    start: float
    end: float
    deps: tuple[str, ...] = ()

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass
class LayerTiming:
    strategy: str
    spans: list[Span]
    layer_latency: float
    exposed_transfer: float


@dataclass(frozen=True)
class LayerCostInputs:
    """Per-layer component times in microseconds plus the attention split fraction."""

    indexer_us: float
    pre_attn_us: float
    attn_us: float
    merge_us: float
    h2d_us: float
    d2h_us: float
    miss_fraction: float  # in [0, 1]; splits attention into resident/fetched stages
    duplex: bool = True


def _build(spans_spec: list[tuple[str, float, tuple[str, ...]]]) -> list[Span]:
    """Materialize spans in dependency order; each starts at its deps' latest end."""
    done: dict[str, Span] = {}
    for name, dur, deps in spans_spec:
        start = max((done[d].end for d in deps), default=0.0)
        done[name] = Span(name=name, start=start, end=start + dur, deps=deps)
    return list(done.values())


def _finish(strategy: str, spec_fn, c: LayerCostInputs) -> LayerTiming:
    spans = _build(spec_fn(c))
    latency = max(s.end for s in spans)
    quiet = _build(spec_fn(_zero_transfers(c)))
    exposed = latency - max(s.end for s in quiet)
    return LayerTiming(strategy=strategy, spans=spans, layer_latency=latency,
                       exposed_transfer=exposed)


def _zero_transfers(c: LayerCostInputs) -> LayerCostInputs:
    return LayerCostInputs(indexer_us=c.indexer_us, pre_attn_us=c.pre_attn_us,
                           attn_us=c.attn_us, merge_us=c.merge_us, h2d_us=0.0,
                           d2h_us=0.0, miss_fraction=c.miss_fraction, duplex=c.duplex)


def _attn_split(c: LayerCostInputs) -> tuple[float, float, float]:
    attn0 = c.attn_us * (1.0 - c.miss_fraction)
    attn1 = c.attn_us * c.miss_fraction
    merge = c.merge_us if c.miss_fraction > 0.0 else 0.0
    return attn0, attn1, merge


def layer_time_none(c: LayerCostInputs) -> LayerTiming:
    """Fully serialized baseline: PreAttn -> Indexer -> transfers -> Attention."""

    def spec(c: LayerCostInputs):
        d2h_deps = ("indexer",) if c.duplex else ("h2d",)
        return [
            ("pre_attn", c.pre_attn_us, ()),
            ("indexer", c.indexer_us, ("pre_attn",)),
            ("h2d", c.h2d_us, ("indexer",)),
            ("d2h", c.d2h_us, d2h_deps),
            ("attn", c.attn_us, ("h2d", "d2h")),
        ]

    return _finish("none", spec, c)


def layer_time_da(c: LayerCostInputs) -> LayerTiming:
    """Dual-attention overlap: PreAttn + resident-entry attention hide the prefetch."""

    def spec(c: LayerCostInputs):
        a0, a1, m = _attn_split(c)
        d2h_deps = ("indexer",) if c.duplex else ("h2d",)
        return [
            ("indexer", c.indexer_us, ()),
            ("h2d", c.h2d_us, ("indexer",)),
            ("d2h", c.d2h_us, d2h_deps),
            ("pre_attn", c.pre_attn_us, ("indexer",)),
            ("attn0", a0, ("pre_attn",)),
            ("attn1", a1, ("h2d", "d2h", "attn0")),
            ("merge", m, ("attn1",)),
        ]

    return _finish("da", spec, c)


def layer_time_dba(c: LayerCostInputs, split_fraction: float = DEFAULT_DBA_SPLIT,
                   eta: float = DEFAULT_DBA_ETA) -> LayerTiming:
    """Dual-batch attention overlap: the indexer splits along the batch dimension
    (total compute inflated by eta) so its second half hides the first half's
    prefetch; misses split proportionally to the batch split."""
    strategy = OverlapStrategy(tag="dba", split_fraction=split_fraction, eta=eta)
    f = strategy.split_fraction

    def spec(c: LayerCostInputs):
        a0, a1, m = _attn_split(c)
        d2h_deps = ("idx_b", "h2d_a") if c.duplex else ("h2d_b",)
        return [
            ("idx_a", eta * c.indexer_us * f, ()),
            ("h2d_a", c.h2d_us * f, ("idx_a",)),
            ("idx_b", eta * c.indexer_us * (1.0 - f), ("idx_a",)),
            ("h2d_b", c.h2d_us * (1.0 - f), ("h2d_a", "idx_b")),
            ("pre_attn", c.pre_attn_us, ("idx_b", "h2d_a")),
            ("d2h", c.d2h_us, d2h_deps),
            ("attn0", a0, ("pre_attn",)),
            ("attn1", a1, ("h2d_b", "d2h", "attn0")),
            ("merge", m, ("attn1",)),
        ]

    return _finish("dba", spec, c)


_LAYER_TIME = {
    "none": lambda c, split, eta: layer_time_none(c),
    "da": lambda c, split, eta: layer_time_da(c),
    "dba": lambda c, split, eta: layer_time_dba(c, split_fraction=split, eta=eta),
}


@dataclass
class LayerPlan:
    strategies: list[str]
    threshold: float
    source: str = ""

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for tag in self.strategies:
            out[tag] = out.get(tag, 0) + 1
        return out


def plan_layers(profile: MissProfile, threshold: float, source: str = "") -> LayerPlan:
    """Per-layer strategy choice: dba wherever the mean miss count reaches the
    threshold, da elsewhere."""
    means = profile.layer_means()
    tags = ["dba" if m >= threshold else "da" for m in means]
    return LayerPlan(strategies=tags, threshold=threshold, source=source)


def apply_tbo(layer_compute_us: float, moe_comm_us: float, enabled: bool,
              split_overhead_frac: float = DEFAULT_TBO_SPLIT_OVERHEAD) -> float:
    """Two-batch overlap: expert-parallel communication pipelines under compute,
    at the price of a small micro-batch split overhead."""
    if not enabled:
        return layer_compute_us + moe_comm_us
    return max(layer_compute_us, moe_comm_us) + split_overhead_frac * layer_compute_us


def layer_cost_inputs(scenario: Scenario, table: CostTable, transfer: TransferModel,
                      miss_per_request: float, d2h_tokens: int = 1) -> LayerCostInputs:
    """Per-layer component times for one miss level; transfers are batch-aggregated."""
    model, deploy = scenario.model, scenario.deploy
    batch = deploy.batch_size
    ctx = deploy.context_len
    eff_batch = effective_token_width(model.mtp_width) * batch
    return LayerCostInputs(
        indexer_us=op_time(table, "indexer_logits", eff_batch, ctx)
        + op_time(table, "indexer_topk", batch, ctx),
        pre_attn_us=op_time(table, "pre_attn", eff_batch, ctx),
        attn_us=op_time(table, "sparse_mla", batch, ctx),
        merge_us=op_time(table, "merge_attn", batch, ctx),
        h2d_us=transfer_time(transfer, int(round(miss_per_request * batch)), "h2d"),
        d2h_us=transfer_time(transfer, d2h_tokens * batch, "d2h"),
        miss_fraction=min(1.0, miss_per_request / scenario.effective_topk()),
        duplex=scenario.hw.pcie_duplex,
    )


@dataclass
class IterationResult:
    total_us: float
    layer_timings: list[LayerTiming]
    layer_other_us: list[float]
    exposed_transfer_us: float


def simulate_iteration(scenario: Scenario, table: CostTable, transfer: TransferModel,
                       per_layer_miss: np.ndarray, plan: LayerPlan,
                       d2h_tokens: int = 1,
                       split_fraction: float = DEFAULT_DBA_SPLIT,
                       eta: float = DEFAULT_DBA_ETA,
                       tbo_split_overhead: float = DEFAULT_TBO_SPLIT_OVERHEAD,
                       ) -> IterationResult:
    """Compose one decode iteration from per-layer miss counts (per request).

    Transfers move ``miss * batch`` latent blocks in and ``d2h_tokens * batch``
    newly generated blocks out per layer; MoE communication overlaps per-layer
    dense compute when two-batch overlap is enabled.
    """
    model, deploy = scenario.model, scenario.deploy
    if len(per_layer_miss) != model.num_layers:
        raise ValueError(f"expected {model.num_layers} miss counts, got {len(per_layer_miss)}")
    if len(plan.strategies) != model.num_layers:
        raise ValueError(f"plan covers {len(plan.strategies)} layers, expected {model.num_layers}")
    batch = deploy.batch_size
    ctx = deploy.context_len
    eff_batch = effective_token_width(model.mtp_width) * batch
    dense_us = op_time(table, "dense_mlp", eff_batch, ctx)
    comm_us = op_time(table, "moe_dispatch", batch, ctx) \
        + op_time(table, "moe_combine", batch, ctx)
    other_us = apply_tbo(dense_us, comm_us, deploy.tbo_enabled, tbo_split_overhead)

    timings: list[LayerTiming] = []
    others: list[float] = []
    total = 0.0
    exposed = 0.0
    for layer, tag in enumerate(plan.strategies):
        inputs = layer_cost_inputs(scenario, table, transfer,
                                   float(per_layer_miss[layer]), d2h_tokens)
        timing = _LAYER_TIME[tag](inputs, split_fraction, eta)
        timings.append(timing)
        others.append(other_us)
        total += timing.layer_latency + other_us
        exposed += timing.exposed_transfer
    return IterationResult(total_us=total, layer_timings=timings,
                           layer_other_us=others, exposed_transfer_us=exposed)


@dataclass
class DecodeReport:
    scenario: Scenario
    plan: LayerPlan
    profile: MissProfile
    iter_us: np.ndarray
    mean_iter_us: float
    otps: float
    throughput: float

    def csv_row(self) -> list:
        d, m = self.scenario.deploy, self.scenario.model
        return [d.batch_size, d.sparse_ratio, d.context_len, m.mtp_width,
                m.accept_ratio, f"{self.mean_iter_us:.3f}",
                f"{self.otps:.4f}", f"{self.throughput:.2f}"]


DECODE_REPORT_HEADER = ["batch", "ratio", "context", "mtp", "accept",
                        "mean_iter_us", "otps", "throughput"]


def make_plan(scenario: Scenario, profile: MissProfile) -> LayerPlan:
    policy = scenario.deploy.overlap_policy
    if policy == "layerwise":
        return plan_layers(profile, scenario.deploy.layerwise_threshold, source="layerwise")
    return LayerPlan(strategies=[policy] * scenario.model.num_layers,
                     threshold=float("inf"), source=policy)


def simulate_decode(scenario: Scenario, trace: AccessTrace, table: CostTable,
                    transfer: TransferModel, use_warmup: bool = True,
                    split_fraction: float = DEFAULT_DBA_SPLIT,
                    eta: float = DEFAULT_DBA_ETA,
                    tbo_split_overhead: float = DEFAULT_TBO_SPLIT_OVERHEAD,
                    ) -> DecodeReport:
    """Replay the trace through the sparse pools, time every step's iteration,
    and aggregate latency, per-request OTPS, and replica-aggregate throughput."""
    model, deploy, hw = scenario.model, scenario.deploy, scenario.hw
    if trace.num_layers != model.num_layers:
        raise ValueError(f"trace has {trace.num_layers} layers, scenario expects {model.num_layers}")
    if trace.context_len != deploy.context_len:
        raise ValueError(f"trace context {trace.context_len} != scenario context {deploy.context_len}")
    profile = replay(trace, deploy.sparse_ratio, use_warmup=use_warmup)
    plan = make_plan(scenario, profile)
    iter_us = np.empty(trace.num_steps)
    for t, step in enumerate(trace.steps):
        result = simulate_iteration(scenario, table, transfer, profile.misses[:, t],
                                    plan, d2h_tokens=step.tokens_accepted,
                                    split_fraction=split_fraction, eta=eta,
                                    tbo_split_overhead=tbo_split_overhead)
        iter_us[t] = result.total_us
    mean_iter = float(iter_us.mean())
    otps = model.accept_ratio / (mean_iter / 1e6)
    throughput = hw.replication * deploy.batch_size * otps
    return DecodeReport(scenario=scenario, plan=plan, profile=profile, iter_us=iter_us,
                        mean_iter_us=mean_iter, otps=otps, throughput=throughput)


def find_dba_crossover(cost_inputs_fn, miss_values,
                       split_fraction: float = DEFAULT_DBA_SPLIT,
                       eta: float = DEFAULT_DBA_ETA) -> float | None:
    """Smallest miss count at which dba beats da, scanning ``miss_values`` in order.

    ``cost_inputs_fn(miss)`` must return the LayerCostInputs for that miss level.
    Returns None when dba never wins on the grid.
    """
    for miss in miss_values:
        c = cost_inputs_fn(miss)
        if layer_time_dba(c, split_fraction, eta).layer_latency \
                < layer_time_da(c).layer_latency:
            return float(miss)
    return None


def export_timeline_json(result: IterationResult, path) -> None:
    """Waterfall-friendly span dump: one record per (layer, span)."""
    records = []
    for layer, timing in enumerate(result.layer_timings):
        for span in timing.spans:
            records.append({"layer": layer, "span": span.name,
                            "start_us": span.start, "end_us": span.end,
                            "strategy": timing.strategy})
    with open(path, "w") as f:
        json.dump(records, f, indent=1)
        f.write("\n")
