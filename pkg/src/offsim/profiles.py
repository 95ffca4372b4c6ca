"""Shipped cost profiles.

Real kernel metadata is site-specific, so two synthetic profiles are bundled:
a calibrated profile fitted to the shipped end-to-end reference table, and a
handcrafted long-context profile whose indexer cost grows linearly with
context, the regime where splitting the indexer across the batch pays off.
"""

from __future__ import annotations

from .costmodel import CostTable, FitResult, fit_profile
from .reference import calibration_rows, load_reference_table
from .scenario import ModelSpec


def calibrated_profile(mtp: int = 2, context: int = 32768,
                       model: ModelSpec | None = None) -> FitResult:
    """Fit the iteration model to one reference-table block and realize it as a
    cost table (per-layer entries)."""
    model = model or ModelSpec()
    rows = calibration_rows(load_reference_table(), mtp=mtp, context=context)
    return fit_profile(rows, num_layers=model.num_layers)


# Long-context study profile.  Per-layer microsecond costs; the indexer logits
# term is proportional to effective_batch * context (bilinear, so interpolation
# reproduces it exactly), everything else is linear in batch at one context.
_IDX_LOGITS_US_PER_B_CTX = 3.1e-5
_IDX_TOPK_US_PER_B = 0.01
_PRE_ATTN_US_PER_B = 0.6
_SPARSE_MLA_US_PER_B = 2.4
_MERGE_US_PER_B = 0.12
_DENSE_US_PER_B = 0.8
_MOE_US = 150.0


def long_context_study_profile(contexts=(2048.0, 32768.0, 131072.0),
                               max_batch: float = 4096.0) -> CostTable:
    ctx_mid = contexts[len(contexts) // 2]

    def linear(slope: float) -> list[tuple[float, float, float]]:
        return [(1.0, ctx_mid, slope), (max_batch, ctx_mid, slope * max_batch)]

    entries = {
        "indexer_logits": [(b, c, _IDX_LOGITS_US_PER_B_CTX * b * c)
                           for b in (1.0, max_batch) for c in contexts],
        "indexer_topk": linear(_IDX_TOPK_US_PER_B),
        "pre_attn": linear(_PRE_ATTN_US_PER_B),
        "sparse_mla": linear(_SPARSE_MLA_US_PER_B),
        "merge_attn": linear(_MERGE_US_PER_B),
        "dense_mlp": linear(_DENSE_US_PER_B),
        "moe_dispatch": [(1.0, ctx_mid, _MOE_US)],
        "moe_combine": [(1.0, ctx_mid, _MOE_US)],
    }
    return CostTable(entries)
