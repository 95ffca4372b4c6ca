"""Latent-cache access traces: generation, similarity analysis, and binary I/O.

A trace records, for every decode step and layer, the sorted set of latent
entry indices selected by the indexer, plus the selection sets from the tail
of prefill that seed cache warm-up.  Real traces can be dropped in through
the binary format; the synthetic generator reproduces the one statistic that
matters downstream, the step-to-step overlap of consecutive selection sets.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

TRACE_MAGIC = b"ESSTRACE"
TRACE_VERSION = 1
PREFILL_WINDOW_COUNT = 32


class TraceFormatError(ValueError):
    """Malformed trace file; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class StepAccess:
    """Per-layer sorted index arrays for one decode step."""

    layers: list[np.ndarray]
    tokens_accepted: int = 1


@dataclass
class AccessTrace:
    num_layers: int
    context_len: int
    topk: int
    steps: list[StepAccess]
    # prefill_windows[layer] is a list of selection sets, oldest first.
    prefill_windows: list[list[np.ndarray]] | None = None

    @property
    def num_steps(self) -> int:
        return len(self.steps)

    def tokens_generated_before(self, step: int) -> int:
        return sum(s.tokens_accepted for s in self.steps[:step])

    def check(self) -> None:
        """Raise ValueError on any structural violation (sortedness, duplicates, range)."""
        for t, step in enumerate(self.steps):
            if len(step.layers) != self.num_layers:
                raise ValueError(f"step {t}: expected {self.num_layers} layers, got {len(step.layers)}")
            limit = self.context_len + self.tokens_generated_before(t)
            for l, arr in enumerate(step.layers):
                if len(arr) and (np.any(np.diff(arr.astype(np.int64)) <= 0)):
                    raise ValueError(f"step {t} layer {l}: indices not strictly increasing")
                if len(arr) and (arr[0] < 0 or int(arr[-1]) >= limit):
                    raise ValueError(f"step {t} layer {l}: index out of range [0, {limit})")


@dataclass
class TraceGenParams:
    num_layers: int = 4
    context_len: int = 32768
    topk: int = 2048
    num_steps: int = 100
    target_similarity: float = 0.9
    recency_bias: float = 1.0
    mean_accept: float = 1.7
    layer_similarity_overrides: dict[int, float] = field(default_factory=dict)
    seed: int = 0

    def violations(self) -> list[str]:
        out = []
        if not (0.0 <= self.target_similarity <= 1.0):
            out.append("target_similarity must be in [0, 1]")
        for l, r in self.layer_similarity_overrides.items():
            if not (0.0 <= r <= 1.0):
                out.append(f"layer {l} similarity override must be in [0, 1]")
        if self.mean_accept < 1.0:
            out.append("mean_accept must be >= 1")
        if self.topk > self.context_len:
            out.append("topk must not exceed context_len at step 0")
        if self.num_steps < 1 or self.num_layers < 1:
            out.append("num_steps and num_layers must be >= 1")
        return out


def _retention_step(prev_mask: np.ndarray, universe: int, k: int, r: float,
                    log_weight: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One retention-resampling step: keep each member with probability r, refill to k
    by Gumbel-top-k over the recency weights of non-members."""
    members = np.flatnonzero(prev_mask[:universe])
    keep = members[rng.random(len(members)) < r]
    fill = k - len(keep)
    if fill > 0:
        mask = np.zeros(universe, dtype=bool)
        mask[keep] = True
        candidates = np.flatnonzero(~mask)
        gumbel = -np.log(-np.log(rng.random(len(candidates))))
        scores = log_weight[candidates] + gumbel
        chosen = candidates[np.argpartition(scores, len(candidates) - fill)[-fill:]]
        keep = np.concatenate([keep, chosen])
    new_mask = np.zeros(len(prev_mask), dtype=bool)
    new_mask[keep] = True
    return new_mask


def generate_trace(p: TraceGenParams) -> AccessTrace:
    """Deterministic synthetic trace with tunable step-to-step selection overlap.

    New tokens are appended to the candidate universe every step with maximal
    recency weight; the prefill windows come from running the same process for
    32 selection events before step 0, so warm-up genuinely predicts early decode.
    """
    bad = p.violations()
    if bad:
        raise ValueError("; ".join(bad))
    rng = np.random.default_rng(p.seed)
    accepted = rng.poisson(p.mean_accept - 1.0, size=p.num_steps).astype(int) + 1
    total_gen = int(accepted.sum())
    max_universe = p.context_len + total_gen
    log_weight = p.recency_bias * np.log1p(np.arange(max_universe, dtype=np.float64))

    per_layer_steps: list[list[np.ndarray]] = []
    windows: list[list[np.ndarray]] = []
    for layer in range(p.num_layers):
        r = p.layer_similarity_overrides.get(layer, p.target_similarity)
        layer_rng = np.random.default_rng(np.random.SeedSequence([p.seed, layer]))
        mask = np.zeros(max_universe, dtype=bool)
        # Initial selection over the prefill universe by recency weight alone.
        gumbel = -np.log(-np.log(layer_rng.random(p.context_len)))
        init = np.argpartition(log_weight[:p.context_len] + gumbel,
                               p.context_len - p.topk)[-p.topk:]
        mask[init] = True
        layer_windows = [np.sort(np.flatnonzero(mask)).astype(np.uint32)]
        for _ in range(PREFILL_WINDOW_COUNT - 1):
            mask = _retention_step(mask, p.context_len, p.topk, r, log_weight, layer_rng)
            layer_windows.append(np.sort(np.flatnonzero(mask)).astype(np.uint32))
        windows.append(layer_windows)

        sets = []
        universe = p.context_len
        for t in range(p.num_steps):
            mask = _retention_step(mask, universe, p.topk, r, log_weight, layer_rng)
            sets.append(np.sort(np.flatnonzero(mask)).astype(np.uint32))
            universe += int(accepted[t])
        per_layer_steps.append(sets)

    steps = [StepAccess(layers=[per_layer_steps[l][t] for l in range(p.num_layers)],
                        tokens_accepted=int(accepted[t]))
             for t in range(p.num_steps)]
    return AccessTrace(num_layers=p.num_layers, context_len=p.context_len,
                       topk=p.topk, steps=steps, prefill_windows=windows)


def intra_layer_similarity(trace: AccessTrace, layer: int) -> np.ndarray:
    """Overlap fraction between consecutive steps' selection sets for one layer.

    Defined for steps t >= 1 as |K_{t-1} & K_t| / |K_t|; empty for single-step traces.
    """
    if layer < 0 or layer >= trace.num_layers:
        raise ValueError(f"layer {layer} out of range")
    out = np.empty(max(0, trace.num_steps - 1), dtype=np.float64)
    for t in range(1, trace.num_steps):
        cur = trace.steps[t].layers[layer]
        prev = trace.steps[t - 1].layers[layer]
        inter = np.intersect1d(prev, cur, assume_unique=True)
        out[t - 1] = len(inter) / len(cur) if len(cur) else 0.0
    return out


@dataclass
class LayerSimilarity:
    layer: int
    mean: float
    stdev: float
    min: float


def similarity_summary(trace: AccessTrace) -> list[LayerSimilarity]:
    if trace.num_steps < 2:
        raise ValueError("similarity summary needs at least 2 steps")
    out = []
    for l in range(trace.num_layers):
        r = intra_layer_similarity(trace, l)
        out.append(LayerSimilarity(layer=l, mean=float(r.mean()),
                                   stdev=float(r.std()), min=float(r.min())))
    return out


def _encode_index_array(buf: io.BytesIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.uint32)
    buf.write(struct.pack("<I", len(arr)))
    if len(arr):
        deltas = np.empty(len(arr), dtype=np.uint32)
        deltas[0] = arr[0]
        deltas[1:] = np.diff(arr)
        buf.write(deltas.tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TraceFormatError(f"truncated file while reading {what}", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _decode_index_array(r: _Reader, limit: int, where: str) -> np.ndarray:
    start = r.pos
    (count,) = r.unpack("<I", f"{where} count")
    raw = np.frombuffer(r.take(4 * count, f"{where} indices"), dtype="<u4")
    arr = np.cumsum(raw.astype(np.uint64))
    if count:
        if np.any(raw[1:] == 0):
            raise TraceFormatError(f"{where}: duplicate index (zero delta)", start)
        if int(arr[-1]) >= limit:
            raise TraceFormatError(f"{where}: index {int(arr[-1])} out of range [0, {limit})", start)
    return arr.astype(np.uint32)


def write_trace(trace: AccessTrace, path) -> None:
    buf = io.BytesIO()
    buf.write(TRACE_MAGIC)
    buf.write(struct.pack("<HIQIQB", TRACE_VERSION, trace.num_layers, trace.context_len,
                          trace.topk, trace.num_steps,
                          1 if trace.prefill_windows is not None else 0))
    for step in trace.steps:
        buf.write(struct.pack("<H", step.tokens_accepted))
        for arr in step.layers:
            _encode_index_array(buf, arr)
    if trace.prefill_windows is not None:
        nwin = len(trace.prefill_windows[0]) if trace.prefill_windows else 0
        buf.write(struct.pack("<I", nwin))
        for layer_windows in trace.prefill_windows:
            for w in layer_windows:
                _encode_index_array(buf, w)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def read_trace(path) -> AccessTrace:
    with open(path, "rb") as f:
        r = _Reader(f.read())
    magic = r.take(len(TRACE_MAGIC), "magic")
    if magic != TRACE_MAGIC:
        raise TraceFormatError(f"bad magic {magic!r}, expected {TRACE_MAGIC!r}", 0)
    version, num_layers, context_len, topk, num_steps, has_windows = \
        r.unpack("<HIQIQB", "header")
    if version != TRACE_VERSION:
        raise TraceFormatError(f"unsupported version {version}", len(TRACE_MAGIC))
    steps = []
    generated = 0
    for t in range(num_steps):
        (accepted,) = r.unpack("<H", f"step {t} tokens_accepted")
        limit = context_len + generated
        layers = [_decode_index_array(r, limit, f"step {t} layer {l}")
                  for l in range(num_layers)]
        steps.append(StepAccess(layers=layers, tokens_accepted=accepted))
        generated += accepted
    windows = None
    if has_windows:
        (nwin,) = r.unpack("<I", "prefill window count")
        windows = []
        for l in range(num_layers):
            windows.append([_decode_index_array(r, context_len, f"prefill layer {l} window {w}")
                            for w in range(nwin)])
    if r.pos != len(r.data):
        raise TraceFormatError("trailing bytes after trace body", r.pos)
    return AccessTrace(num_layers=num_layers, context_len=context_len, topk=topk,
                       steps=steps, prefill_windows=windows)
