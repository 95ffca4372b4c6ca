"""Desk-scale simulator for offload-centric latent-cache serving of
sparse-attention LLM decode: memory/batch planning, access-trace tooling,
LRU sparse-pool replay, interpolated cost models, and overlap-strategy
timeline composition."""

from .scenario import (
    DeploymentSpec,
    HardwareSpec,
    ModelSpec,
    Scenario,
    max_batch_size,
    min_ratio_for_batch,
    per_request_cache_bytes,
    validate_scenario,
)
from .trace import AccessTrace, TraceGenParams, generate_trace, intra_layer_similarity, similarity_summary
from .cache import MissProfile, SparsePool, replay
from .costmodel import CostTable, TransferModel, load_cost_table, op_time, transfer_time
from .pipeline import (
    LayerPlan,
    apply_tbo,
    layer_time_da,
    layer_time_dba,
    layer_time_none,
    plan_layers,
    simulate_decode,
    simulate_iteration,
)

__all__ = [
    "AccessTrace", "CostTable", "DeploymentSpec", "HardwareSpec", "LayerPlan",
    "MissProfile", "ModelSpec", "Scenario", "SparsePool", "TraceGenParams",
    "TransferModel", "apply_tbo", "generate_trace", "intra_layer_similarity",
    "layer_time_da", "layer_time_dba", "layer_time_none", "load_cost_table",
    "max_batch_size", "min_ratio_for_batch", "op_time", "per_request_cache_bytes",
    "plan_layers", "replay", "similarity_summary", "simulate_decode",
    "simulate_iteration", "transfer_time", "validate_scenario",
]
