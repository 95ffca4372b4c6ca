"""Shipped end-to-end reference table and its consistency validator.

The table is transcribed measurement data; the validator checks the internal
arithmetic every downstream calibration leans on: the replica aggregation
identity, the headline improvement ratios, and the memory-model consistency
of the (ratio, batch) operating points.
"""

from __future__ import annotations

import csv
import importlib.resources
from dataclasses import dataclass

import numpy as np

from .costmodel import CalibrationRow
from .scenario import ModelSpec

REFERENCE_RESOURCE = "reference_throughput.csv"

# Relative tolerance for the replica aggregation identity throughput = R * batch * otps.
AGGREGATION_TOLERANCE = 0.005

# Tolerance for batch predictions from the indexer-share memory model.
MEMORY_MODEL_TOLERANCE = 0.06


@dataclass(frozen=True)
class RefRow:
    mtp: int
    context: int
    accept_ratio: float
    batch: int
    sparse_ratio: float
    throughput: float
    otps: float

    @property
    def t_iter_us(self) -> float:
        return self.accept_ratio / self.otps * 1e6


def default_reference_path():
    return importlib.resources.files("offsim.data") / REFERENCE_RESOURCE


def load_reference_table(path=None) -> list[RefRow]:
    path = path or default_reference_path()
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        expected = {"mtp", "context", "accept_ratio", "batch", "sparse_ratio",
                    "throughput", "otps"}
        if set(reader.fieldnames or []) != expected:
            raise ValueError(f"{path}: unexpected reference table header")
        for rec in reader:
            rows.append(RefRow(mtp=int(rec["mtp"]), context=int(rec["context"]),
                               accept_ratio=float(rec["accept_ratio"]),
                               batch=int(rec["batch"]),
                               sparse_ratio=float(rec["sparse_ratio"]),
                               throughput=float(rec["throughput"]),
                               otps=float(rec["otps"])))
    if not rows:
        raise ValueError(f"{path}: empty reference table")
    return rows


def calibration_rows(rows: list[RefRow], mtp: int = 2,
                     context: int = 32768) -> list[CalibrationRow]:
    """Select one (mtp, context) block as calibration input for the cost fit."""
    out = [CalibrationRow(batch=r.batch, context=r.context, sparse_ratio=r.sparse_ratio,
                          mtp_width=r.mtp, t_iter_us=r.t_iter_us)
           for r in rows if r.mtp == mtp and r.context == context]
    if not out:
        raise ValueError(f"no reference rows for mtp={mtp} context={context}")
    return out


@dataclass
class RowFinding:
    row: RefRow
    implied_replication: float
    residual: float  # relative residual against the fitted replication
    flagged: bool


@dataclass
class ImprovementCheck:
    label: str
    ratio: float
    percent: float


@dataclass
class MemoryCheck:
    context: int
    anchor_batch: int
    row: RefRow
    predicted_batch: float
    relative_error: float
    within_tolerance: bool


@dataclass
class ValidationReport:
    replication: int
    rows: list[RowFinding]
    improvements: list[ImprovementCheck]
    memory: list[MemoryCheck]

    @property
    def flagged_rows(self) -> list[RowFinding]:
        return [r for r in self.rows if r.flagged]

    @property
    def ok(self) -> bool:
        return not self.flagged_rows and all(m.within_tolerance for m in self.memory)


def _improvements(rows: list[RefRow]) -> list[ImprovementCheck]:
    out = []
    for mtp, context, accept in ((2, 32768, 1.7), (4, 32768, 3.4), (2, 131072, 1.7)):
        block = [r for r in rows if (r.mtp, r.context, r.accept_ratio) == (mtp, context, accept)]
        if len(block) < 2:
            continue
        base = next(r for r in block if r.sparse_ratio == max(b.sparse_ratio for b in block))
        best = max(block, key=lambda r: r.throughput)
        ratio = best.throughput / base.throughput
        out.append(ImprovementCheck(
            label=f"mtp={mtp} context={context} accept={accept}",
            ratio=ratio, percent=(ratio - 1.0) * 100.0))
    return out


def _memory_checks(rows: list[RefRow], model: ModelSpec) -> list[MemoryCheck]:
    """Within each context block, predict every batch from the full-residency row
    via the indexer-share memory model and compare against the published batch."""
    f = model.indexer_fraction
    out = []
    for context in sorted({r.context for r in rows}):
        block = {(r.sparse_ratio, r.batch) for r in rows if r.context == context}
        pairs = sorted(block, reverse=True)
        anchor_rho, anchor_batch = pairs[0]
        anchor_share = f + (1.0 - f) * anchor_rho
        for r in rows:
            if r.context != context:
                continue
            share = f + (1.0 - f) * r.sparse_ratio
            predicted = anchor_batch * anchor_share / share
            err = (predicted - r.batch) / r.batch
            out.append(MemoryCheck(context=context, anchor_batch=anchor_batch, row=r,
                                   predicted_batch=predicted, relative_error=err,
                                   within_tolerance=abs(err) <= MEMORY_MODEL_TOLERANCE))
    return out


def validate_reference(rows: list[RefRow], model: ModelSpec | None = None,
                       tolerance: float = AGGREGATION_TOLERANCE) -> ValidationReport:
    """Check the aggregation identity, improvement ratios, and memory consistency.

    The fitted replica count is the rounded median of the per-row implied
    values; rows whose identity residual exceeds the tolerance are flagged
    rather than matched.
    """
    model = model or ModelSpec()
    implied = np.array([r.throughput / (r.batch * r.otps) for r in rows])
    replication = int(round(float(np.median(implied))))
    findings = []
    for r, imp in zip(rows, implied):
        resid = (r.throughput - replication * r.batch * r.otps) / r.throughput
        findings.append(RowFinding(row=r, implied_replication=float(imp),
                                   residual=float(resid), flagged=abs(resid) > tolerance))
    return ValidationReport(replication=replication, rows=findings,
                            improvements=_improvements(rows),
                            memory=_memory_checks(rows, model))
