"""Deployment scenarios: model / hardware / deployment specs plus GPU-memory batch planning.

All byte accounting here is desk-scale arithmetic: the only memory knob is
``gpu_mem_bytes`` (usable cache budget after weights/activations); activation
memory, TP/EP sharding and allocator fragmentation deliberately fold into it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


@dataclass(frozen=True)
class ModelSpec:
    """Model dimensions relevant to latent-cache byte accounting and MTP."""

    num_layers: int = 61
    topk: int = 2048
    latent_block_bytes: int = 656
    indexer_fraction: float = 0.168
    mtp_width: int = 2
    accept_ratio: float = 1.7

    def indexer_bytes_per_entry(self) -> float:
        """Indexer-cache bytes per token per layer, derived from its share of total cache bytes."""
        f = self.indexer_fraction
        return self.latent_block_bytes * f / (1.0 - f)

    def violations(self) -> list[str]:
        out = []
        if self.num_layers < 1:
            out.append("model.num_layers: must be >= 1")
        if self.topk < 1:
            out.append("model.topk: must be >= 1")
        if self.latent_block_bytes < 1:
            out.append("model.latent_block_bytes: must be >= 1")
        if not (0.0 < self.indexer_fraction < 1.0):
            out.append("model.indexer_fraction: must be in (0, 1)")
        if self.mtp_width < 0:
            out.append("model.mtp_width: must be >= 0")
        if self.accept_ratio < 1.0:
            out.append("model.accept_ratio: must be >= 1")
        if self.accept_ratio > self.mtp_width + 1:
            out.append("model.accept_ratio: must be <= mtp_width + 1")
        return out


@dataclass(frozen=True)
class HardwareSpec:
    """GPU cache budget, PCIe bandwidths, and replica count for aggregate throughput."""

    gpu_mem_bytes: float
    bw_h2d_gbs: float = 37.0
    bw_d2h_gbs: float = 43.0
    pcie_duplex: bool = True
    replication: int = 8

    def violations(self) -> list[str]:
        out = []
        if self.gpu_mem_bytes <= 0:
            out.append("hw.gpu_mem_bytes: must be > 0")
        if self.bw_h2d_gbs <= 0:
            out.append("hw.bw_h2d_gbs: must be > 0")
        if self.bw_d2h_gbs <= 0:
            out.append("hw.bw_d2h_gbs: must be > 0")
        if self.replication < 1:
            out.append("hw.replication: must be >= 1")
        return out


OVERLAP_POLICIES = ("none", "da", "dba", "layerwise")


@dataclass(frozen=True)
class DeploymentSpec:
    context_len: int = 32768
    batch_size: int = 52
    sparse_ratio: float = 1.0
    tbo_enabled: bool = True
    overlap_policy: str = "da"
    layerwise_threshold: float = 512.0

    def violations(self) -> list[str]:
        out = []
        if self.context_len < 1:
            out.append("deploy.context_len: must be >= 1")
        if self.batch_size < 1:
            out.append("deploy.batch_size: must be >= 1")
        if not (0.0 < self.sparse_ratio <= 1.0):
            out.append("deploy.sparse_ratio: must be in (0, 1]")
        if self.overlap_policy not in OVERLAP_POLICIES:
            out.append(f"deploy.overlap_policy: must be one of {OVERLAP_POLICIES}")
        if self.layerwise_threshold < 0:
            out.append("deploy.layerwise_threshold: must be >= 0")
        return out


@dataclass(frozen=True)
class Scenario:
    model: ModelSpec
    hw: HardwareSpec
    deploy: DeploymentSpec

    def effective_topk(self) -> int:
        # Top-K over fewer than K candidates clamps to the candidate count.
        return min(self.model.topk, self.deploy.context_len)


def per_request_cache_bytes(model: ModelSpec, context_len: int, sparse_ratio: float) -> float:
    """GPU-resident cache bytes for one request.

    The indexer cache is never offloaded; only ``sparse_ratio`` of the latent
    entries stay resident.  Affine in the ratio, exact at ratio 1 (full
    footprint) and in the ratio->0 limit (indexer-only footprint).
    """
    if not (0.0 < sparse_ratio <= 1.0):
        raise ValueError(f"sparse_ratio must be in (0, 1], got {sparse_ratio}")
    per_token = model.indexer_bytes_per_entry() + sparse_ratio * model.latent_block_bytes
    return context_len * model.num_layers * per_token


def max_batch_size(model: ModelSpec, hw: HardwareSpec, context_len: int,
                   sparse_ratio: float) -> int:
    """Largest batch whose resident cache fits the GPU budget; 0 if even one request does not fit."""
    per_req = per_request_cache_bytes(model, context_len, sparse_ratio)
    return int(hw.gpu_mem_bytes // per_req)


def min_ratio_for_batch(model: ModelSpec, hw: HardwareSpec, context_len: int,
                        batch_size: int, grid_step: float = 0.01) -> float | None:
    """Largest grid ratio that still admits ``batch_size``, i.e. how much latent
    residency must be given up to fit the batch.  None when no grid ratio works.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = int(round(1.0 / grid_step))
    for k in range(n, 0, -1):
        rho = k * grid_step
        if max_batch_size(model, hw, context_len, rho) >= batch_size:
            return round(rho, 10)
    return None


def validate_scenario(s: Scenario) -> list[str]:
    """Collect every invariant violation; an empty list means the scenario is runnable."""
    out = s.model.violations() + s.hw.violations() + s.deploy.violations()
    if out:
        return out
    per_req = per_request_cache_bytes(s.model, s.deploy.context_len, s.deploy.sparse_ratio)
    if per_req * s.deploy.batch_size > s.hw.gpu_mem_bytes:
        fit = max_batch_size(s.model, s.hw, s.deploy.context_len, s.deploy.sparse_ratio)
        out.append(
            f"deploy.batch_size: memory infeasible, batch {s.deploy.batch_size} needs "
            f"{per_req * s.deploy.batch_size / 1e9:.2f} GB > budget "
            f"{s.hw.gpu_mem_bytes / 1e9:.2f} GB (max batch {fit})")
    return out


# Calibration anchor: the published full-residency operating point at 32K context.
CALIBRATION_BATCH = 52
CALIBRATION_CONTEXT = 32768
CALIBRATION_HEADROOM = 1.004


def calibrated_gpu_mem_bytes(model: ModelSpec | None = None,
                             batch_at_full: int = CALIBRATION_BATCH,
                             context_len: int = CALIBRATION_CONTEXT,
                             headroom: float = CALIBRATION_HEADROOM) -> float:
    """Cache budget fitted so the full-residency batch at the anchor context comes out right.

    A slim headroom keeps the floor division away from float-rounding edges
    without admitting an extra request.
    """
    model = model or ModelSpec()
    return batch_at_full * per_request_cache_bytes(model, context_len, 1.0) * headroom


def default_scenario() -> Scenario:
    model = ModelSpec()
    hw = HardwareSpec(gpu_mem_bytes=calibrated_gpu_mem_bytes(model))
    return Scenario(model=model, hw=hw, deploy=DeploymentSpec())


_SECTION_TYPES = {"model": ModelSpec, "hardware": HardwareSpec, "deploy": DeploymentSpec}

# [transfer] is parsed by the cost model; the loader only passes it through.
_PASSTHROUGH_SECTIONS = ("transfer",)


def scenario_from_dict(cfg: dict, overrides: dict | None = None) -> tuple[Scenario, dict]:
    """Build a Scenario from parsed config sections, rejecting unknown keys.

    ``overrides`` maps dotted keys (e.g. ``"deploy.batch_size"``) to values and
    takes precedence over file contents.  Returns the scenario plus the raw
    ``[transfer]`` section (possibly empty).
    """
    unknown = set(cfg) - set(_SECTION_TYPES) - set(_PASSTHROUGH_SECTIONS)
    if unknown:
        raise ValueError(f"unknown config section(s): {sorted(unknown)}")
    merged = {name: dict(cfg.get(name, {})) for name in _SECTION_TYPES}
    merged["transfer"] = dict(cfg.get("transfer", {}))
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if section not in merged or not key:
            raise ValueError(f"unknown override key: {dotted}")
        merged[section][key] = value

    built = {}
    for name, cls in _SECTION_TYPES.items():
        allowed = {f.name for f in fields(cls)}
        unknown = set(merged[name]) - allowed
        if unknown:
            raise ValueError(f"unknown key(s) in [{name}]: {sorted(unknown)}")
        section = dict(merged[name])
        if name == "hardware" and "gpu_mem_bytes" not in section:
            section["gpu_mem_bytes"] = calibrated_gpu_mem_bytes()
        built[name] = cls(**section)
    scenario = Scenario(model=built["model"], hw=built["hardware"], deploy=built["deploy"])
    return scenario, merged["transfer"]


def load_scenario_file(path, overrides: dict | None = None) -> tuple[Scenario, dict]:
    """Read a TOML scenario file; CLI flag overrides take precedence over file values."""
    with open(path, "rb") as f:
        cfg = tomllib.load(f)
    return scenario_from_dict(cfg, overrides)
