"""Experiment driver: scenario sweeps, reference validation, calibration, and
trace tooling.

Exit codes: 0 success, 1 validation findings, 2 input errors.  All outputs are
plain CSV/JSON plot data with deterministic ordering and formatting.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import cache, costmodel, pipeline, profiles, reference, scenario as scn, trace as tracemod

DEFAULT_SWEEP_CAP = 10_000
DEFAULT_TRACE_STEPS = 64
DEFAULT_TRACE_LAYERS = 8


def _fail(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return 2


def _load_scenario(args, extra_overrides=None) -> tuple[scn.Scenario, costmodel.TransferModel]:
    overrides = dict(extra_overrides or {})
    if args.config:
        s, transfer_cfg = scn.load_scenario_file(args.config, overrides)
    else:
        base = scn.default_scenario()
        cfg = {name: dataclasses.asdict(part) for name, part in
               (("model", base.model), ("hardware", base.hw), ("deploy", base.deploy))}
        s, transfer_cfg = scn.scenario_from_dict(cfg, overrides)
    return s, costmodel.TransferModel.from_dict(transfer_cfg)


def _load_profile(args, s: scn.Scenario) -> costmodel.CostTable:
    if args.profile:
        return costmodel.load_cost_table(args.profile)
    return profiles.calibrated_profile(mtp=s.model.mtp_width,
                                       context=s.deploy.context_len
                                       if s.deploy.context_len in (32768, 131072)
                                       else 32768,
                                       model=s.model).table


def _gen_trace(s: scn.Scenario, seed: int, similarity: float, steps: int,
               layers: int | None = None) -> tracemod.AccessTrace:
    return tracemod.generate_trace(tracemod.TraceGenParams(
        num_layers=layers or s.model.num_layers,
        context_len=s.deploy.context_len,
        topk=s.effective_topk(),
        num_steps=steps,
        target_similarity=similarity,
        mean_accept=s.model.accept_ratio,
        seed=seed))


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    s, transfer = _load_scenario(args, _cli_overrides(args))
    bad = scn.validate_scenario(s)
    if bad:
        for b in bad:
            print(f"invalid scenario: {b}", file=sys.stderr)
        return 2
    table = _load_profile(args, s)
    if args.trace:
        tr = tracemod.read_trace(args.trace)
    else:
        tr = _gen_trace(s, args.seed, args.gen_similarity, args.gen_steps)
    report = pipeline.simulate_decode(s, tr, table, transfer, use_warmup=not args.no_warmup)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "decode_report.csv", pipeline.DECODE_REPORT_HEADER, [report.csv_row()])
    if args.timeline:
        result = pipeline.simulate_iteration(
            s, table, transfer, report.profile.misses[:, 0], report.plan,
            d2h_tokens=tr.steps[0].tokens_accepted)
        pipeline.export_timeline_json(result, out / "timeline.json")
    print(f"mean_iter_us={report.mean_iter_us:.3f} otps={report.otps:.4f} "
          f"throughput={report.throughput:.2f}")
    return 0


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def _sweep_points(args, base: scn.Scenario):
    batches = [int(x) for x in args.batch_list.split(",")]
    ratios = [float(x) for x in args.ratio_list.split(",")]
    contexts = [int(x) for x in args.context_list.split(",")] \
        if args.context_list else [base.deploy.context_len]
    mtps = []
    for item in (args.mtp_list or f"{base.model.mtp_width}:{base.model.accept_ratio}").split(","):
        mtp, _, accept = item.partition(":")
        mtps.append((int(mtp), float(accept or base.model.accept_ratio)))
    policies = (args.policy_list or base.deploy.overlap_policy).split(",")
    points = [(c, r, b, m, a, p)
              for c in contexts for r in ratios for b in batches
              for m, a in mtps for p in policies]
    return points


def _sweep_one(payload):
    base, transfer, table, point, seed, similarity, steps, layers = payload
    context, ratio, batch, mtp, accept, policy = point
    s = scn.Scenario(
        model=dataclasses.replace(base.model, mtp_width=mtp, accept_ratio=accept),
        hw=base.hw,
        deploy=dataclasses.replace(base.deploy, context_len=context, batch_size=batch,
                                   sparse_ratio=ratio, overlap_policy=policy))
    bad = scn.validate_scenario(s)
    if bad:
        return point, None, "; ".join(bad)
    tr = _gen_trace(s, seed, similarity, steps, layers=layers)
    report = pipeline.simulate_decode(s, tr, table, transfer)
    return point, report, None


def cmd_sweep(args) -> int:
    base, transfer = _load_scenario(args)
    points = _sweep_points(args, base)
    if len(points) > args.cap:
        return _fail(f"sweep has {len(points)} points, cap is {args.cap}")
    table = _load_profile(args, base)
    layers = min(base.model.num_layers, args.trace_layers)
    # Trace layer count is capped for speed; miss statistics per layer are what
    # matter and the generator treats layers identically up to the seed.
    payloads = [(base, transfer, table, p, args.seed, args.gen_similarity,
                 args.gen_steps, layers) for p in points]
    if args.jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as ex:
            results = list(ex.map(_sweep_one, payloads))
    else:
        results = [_sweep_one(p) for p in payloads]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, tvb, mvr = [], [], []
    for (context, ratio, batch, mtp, accept, policy), report, err in results:
        if err is not None:
            rows.append([batch, ratio, context, mtp, accept, "infeasible", "infeasible",
                         "infeasible"])
            continue
        rows.append(report.csv_row())
        tvb.append([batch, context, ratio, policy, f"{report.throughput:.2f}"])
        mvr.append([context, ratio, f"{report.profile.mean_misses():.4f}"])
    _write_csv(out / "report.csv", pipeline.DECODE_REPORT_HEADER, rows)
    _write_csv(out / "throughput_vs_batch.csv",
               ["batch", "context", "ratio", "policy", "throughput"], tvb)
    seen = sorted(set(map(tuple, mvr)))
    _write_csv(out / "miss_vs_ratio.csv", ["context", "ratio", "mean_misses"],
               [list(t) for t in seen])
    _write_warmup_effect(out, base, points, args, layers)
    print(f"sweep: {len(points)} points -> {out}")
    return 0


def _write_warmup_effect(out: Path, base, points, args, layers) -> None:
    """Before/after warm-up miss series for the first sweep point's shape."""
    context, ratio = points[0][0], points[0][1]
    s = dataclasses.replace(base, deploy=dataclasses.replace(
        base.deploy, context_len=context, sparse_ratio=ratio, batch_size=1))
    tr = _gen_trace(s, args.seed, args.gen_similarity, args.gen_steps, layers=layers)
    with_w = cache.replay(tr, ratio, use_warmup=True)
    without = cache.replay(tr, ratio, use_warmup=False)
    rows = [[t, int(with_w.misses[:, t].sum()), int(without.misses[:, t].sum())]
            for t in range(tr.num_steps)]
    _write_csv(out / "warmup_effect.csv",
               ["step", "misses_with_warmup", "misses_without_warmup"], rows)


# ---------------------------------------------------------------------------
# validate-ref
# ---------------------------------------------------------------------------

def cmd_validate_ref(args) -> int:
    rows = reference.load_reference_table(args.table)
    report = reference.validate_reference(rows)
    print(f"fitted replication R = {report.replication}")
    for finding in report.rows:
        r = finding.row
        mark = "FLAGGED" if finding.flagged else "ok"
        print(f"  mtp={r.mtp} ctx={r.context} batch={r.batch} ratio={r.sparse_ratio}: "
              f"implied R {finding.implied_replication:.3f}, "
              f"residual {finding.residual * 100:+.3f}% [{mark}]")
    for imp in report.improvements:
        print(f"improvement {imp.label}: x{imp.ratio:.4f} ({imp.percent:.1f}%)")
    for m in report.memory:
        mark = "ok" if m.within_tolerance else "FLAGGED"
        print(f"memory ctx={m.context} batch={m.row.batch} ratio={m.row.sparse_ratio}: "
              f"predicted {m.predicted_batch:.1f} ({m.relative_error * 100:+.2f}%) [{mark}]")
    return 0 if report.ok else 1


# ---------------------------------------------------------------------------
# calibrate
# ---------------------------------------------------------------------------

def cmd_calibrate(args) -> int:
    rows = reference.load_reference_table(args.table)
    fit_rows = reference.calibration_rows(rows, mtp=args.mtp, context=args.context)
    try:
        result = costmodel.fit_profile(fit_rows)
    except costmodel.UnderdeterminedFitError as e:
        return _fail(str(e))
    costmodel.save_cost_table(result.table, args.out_profile)
    report_rows = []
    for row, fitted, resid in zip(result.report.rows, result.report.fitted_us,
                                  result.report.residual_pct):
        report_rows.append(["fit", row.mtp_width, row.batch, row.sparse_ratio,
                            f"{row.t_iter_us:.1f}", f"{fitted:.1f}", f"{resid:+.3f}"])
    holdout = [r for r in rows if r.context == args.context and r.mtp != args.mtp]
    for r in holdout:
        pred = result.fit.predict_otps(r.batch, r.sparse_ratio, r.mtp, r.accept_ratio)
        err = (pred - r.otps) / r.otps * 100.0
        report_rows.append(["holdout", r.mtp, r.batch, r.sparse_ratio,
                            f"{r.otps:.2f}", f"{pred:.2f}", f"{err:+.3f}"])
    report_path = Path(args.out_profile).with_suffix(".fit_report.csv")
    _write_csv(report_path, ["split", "mtp", "batch", "ratio", "reference", "fitted",
                             "residual_pct"], report_rows)
    print(f"profile -> {args.out_profile}; fit report -> {report_path}")
    return 0


# ---------------------------------------------------------------------------
# trace gen | stats | convert
# ---------------------------------------------------------------------------

def cmd_trace(args) -> int:
    if args.trace_cmd == "gen":
        p = tracemod.TraceGenParams(
            num_layers=args.layers, context_len=args.context, topk=args.topk,
            num_steps=args.steps, target_similarity=args.similarity,
            recency_bias=args.recency_bias, mean_accept=args.mean_accept,
            seed=args.seed)
        tracemod.write_trace(tracemod.generate_trace(p), args.out)
        print(f"trace -> {args.out}")
        return 0
    if args.trace_cmd == "stats":
        tr = tracemod.read_trace(args.trace)
        summary = tracemod.similarity_summary(tr)
        rows = [[s.layer, f"{s.mean:.6f}", f"{s.stdev:.6f}", f"{s.min:.6f}"]
                for s in summary]
        _write_csv(Path(args.out), ["layer", "mean_similarity", "stdev", "min"], rows)
        print(f"stats -> {args.out}")
        return 0
    if args.trace_cmd == "convert":
        tracemod.write_trace(tracemod.read_trace(args.input), args.out)
        print(f"converted -> {args.out}")
        return 0
    return _fail(f"unknown trace subcommand {args.trace_cmd!r}")


# ---------------------------------------------------------------------------
# plan
# ---------------------------------------------------------------------------

def cmd_plan(args) -> int:
    profile = cache.read_miss_profile_csv(args.miss_profile)
    plan = pipeline.plan_layers(profile, args.theta, source=str(args.miss_profile))
    with open(args.out, "w") as f:
        json.dump({"threshold": plan.threshold, "source": plan.source,
                   "strategies": plan.strategies, "counts": plan.counts()}, f, indent=1)
        f.write("\n")
    print(f"plan -> {args.out}: {plan.counts()}")
    return 0


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------

def _cli_overrides(args) -> dict:
    out = {}
    for dest, dotted in (("batch", "deploy.batch_size"), ("ratio", "deploy.sparse_ratio"),
                         ("context", "deploy.context_len"), ("policy", "deploy.overlap_policy")):
        val = getattr(args, dest, None)
        if val is not None:
            out[dotted] = val
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="offsim", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True)

    def common(p, profile=True):
        p.add_argument("--config", default=None, help="TOML scenario file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default="out")
        p.add_argument("--jobs", type=int, default=1)
        if profile:
            p.add_argument("--profile", default=None, help="cost-table CSV")

    p = sub.add_parser("simulate", help="run one scenario end to end")
    common(p)
    p.add_argument("--trace", default=None, help="binary trace file (otherwise generated)")
    p.add_argument("--gen-similarity", type=float, default=0.9)
    p.add_argument("--gen-steps", type=int, default=DEFAULT_TRACE_STEPS)
    p.add_argument("--no-warmup", action="store_true")
    p.add_argument("--timeline", action="store_true", help="dump first-step span timeline")
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--ratio", type=float, default=None)
    p.add_argument("--context", type=int, default=None)
    p.add_argument("--policy", default=None)
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("sweep", help="cartesian scenario sweep")
    common(p)
    p.add_argument("--batch-list", required=True)
    p.add_argument("--ratio-list", required=True)
    p.add_argument("--context-list", default=None)
    p.add_argument("--mtp-list", default=None, help="e.g. 2:1.7,4:2.8")
    p.add_argument("--policy-list", default=None)
    p.add_argument("--gen-similarity", type=float, default=0.9)
    p.add_argument("--gen-steps", type=int, default=DEFAULT_TRACE_STEPS)
    p.add_argument("--trace-layers", type=int, default=DEFAULT_TRACE_LAYERS)
    p.add_argument("--cap", type=int, default=DEFAULT_SWEEP_CAP)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("validate-ref", help="check the reference table's arithmetic")
    p.add_argument("--table", default=None)
    p.set_defaults(fn=cmd_validate_ref)

    p = sub.add_parser("calibrate", help="fit a cost profile to reference rows")
    p.add_argument("--table", default=None)
    p.add_argument("--mtp", type=int, default=2)
    p.add_argument("--context", type=int, default=32768)
    p.add_argument("--out-profile", required=True)
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("trace", help="trace tooling")
    tsub = p.add_subparsers(dest="trace_cmd", required=True)
    g = tsub.add_parser("gen")
    g.add_argument("--out", required=True)
    g.add_argument("--layers", type=int, default=DEFAULT_TRACE_LAYERS)
    g.add_argument("--context", type=int, default=32768)
    g.add_argument("--topk", type=int, default=2048)
    g.add_argument("--steps", type=int, default=DEFAULT_TRACE_STEPS)
    g.add_argument("--similarity", type=float, default=0.9)
    g.add_argument("--recency-bias", type=float, default=1.0)
    g.add_argument("--mean-accept", type=float, default=1.7)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_trace)
    st = tsub.add_parser("stats")
    st.add_argument("--trace", required=True)
    st.add_argument("--out", required=True)
    st.set_defaults(fn=cmd_trace)
    cv = tsub.add_parser("convert")
    cv.add_argument("--input", required=True)
    cv.add_argument("--out", required=True)
    cv.set_defaults(fn=cmd_trace)

    p = sub.add_parser("plan", help="layer-wise strategy plan from a miss profile")
    p.add_argument("--miss-profile", required=True)
    p.add_argument("--theta", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_plan)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError) as e:
        return _fail(str(e))


if __name__ == "__main__":
    sys.exit(main())
