"""Command-line entry point: ``loadid <subcommand> [options]``.

Each stage reads the previous stage's artifact and writes its own:

    gen-schedule -> simulate -> prepare -> train -> infer -> eval

plus ``sync-sim`` (synchronization Monte-Carlo) and ``ablate`` (interval and
dataset-balance sweeps).  Exit codes: 0 success, 2 parameter error, 3 format
error, 4 degenerate input.  ``LOADID_THREADS`` caps the thread pools of the
numeric libraries.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS")


def _apply_thread_cap() -> None:
    cap = os.environ.get("LOADID_THREADS")
    if cap:
        if not cap.isdigit() or int(cap) < 1:
            from .errors import ParameterError
            raise ParameterError(f"LOADID_THREADS must be a positive integer, got {cap!r}")
        for var in _THREAD_VARS:
            os.environ[var] = cap


def _print(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True))


def _config(args):
    from .experiment import ExperimentConfig

    if not args.config:
        return ExperimentConfig()
    from .errors import FormatError
    with open(_require(args.config, "config"), encoding="utf-8") as fh:
        text = fh.read()
    try:
        return ExperimentConfig.from_json(text)
    except (json.JSONDecodeError, TypeError) as exc:
        raise FormatError(f"malformed config {args.config}: {exc}") from exc


def _require(path, what: str) -> str:
    from .errors import ParameterError

    if not path or not os.path.exists(path):
        raise ParameterError(f"missing {what}: {path}")
    return path


def _catalog(args, cfg=None):
    from .simulate import load_catalog

    path = getattr(args, "catalog", None) or (cfg.catalog_path if cfg else None)
    return load_catalog(_require(path, "appliance catalog") if path else None)


def _out(args, default: str) -> str:
    out = args.out or default
    parent = os.path.dirname(out)
    if parent:
        os.makedirs(parent, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# Subcommands

def cmd_gen_schedule(args) -> int:
    from .schedule import (ScheduleParams, generate_schedule, load_schedule, overlap_ratio, save_schedule,
                           schedule_stats)

    params = ScheduleParams(args.n_appliances, args.group_size, args.groups_active, args.rounds, args.dwell,
                            args.seed if args.seed is not None else 0)
    sched = generate_schedule(params)
    out = _out(args, "schedule.jsonl")
    save_schedule(sched, out)
    st = schedule_stats(sched)
    summary = {"path": out, "events": len(sched), "events_per_appliance": st.events_per_appliance,
               "unique_states": st.unique_states, "event_br": st.event_br, "state_br": st.state_br,
               "hours": sched.duration_hours()}
    if args.compare:
        summary["overlap_ratio"] = overlap_ratio(load_schedule(_require(args.compare, "schedule")), sched)
    _print(summary)
    return 0


def cmd_simulate(args) -> int:
    import numpy as np

    from .schedule import load_schedule
    from .simulate import execute_schedule, load_trace, save_trace

    cfg = _config(args)
    sched = load_schedule(_require(args.schedule, "schedule"))
    catalog = _catalog(args, cfg)
    grid = cfg.grid
    if args.noise_std is not None:
        grid.noise_std_a = args.noise_std
    seed = args.seed if args.seed is not None else cfg.train_trace_seed
    trace = execute_schedule(sched, catalog, grid, seed=seed, keep_individual=args.keep_individual,
                             dtype=np.float32)
    out = _out(args, "trace.hwk")
    save_trace(trace, out)
    back = load_trace(out, catalog)
    summary = {"path": out, "cycles": len(back), "hours": back.duration_hours, "events": len(back.events()),
               "header": {"sample_rate_hz": back.grid.sample_rate_hz, "mains_hz": back.grid.mains_hz,
                          "cycle_len": back.grid.cycle_len, "n_appliances": back.n_appliances}}
    if back.individual is not None:
        resid = back.aggregate - back.individual.sum(axis=1)
        rms = float(np.sqrt(np.mean(np.square(resid - grid.noise_mean_a))))
        summary["kirchhoff_residual_rms_a"] = rms
        summary["kirchhoff_ok"] = bool(rms <= 1.5 * grid.noise_std_a + 1e-4)
    _print(summary)
    return 0


def cmd_prepare(args) -> int:
    from .pipeline import locate_obvious_events, prepare_training_set, save_samples
    from .simulate import load_trace

    cfg = _config(args)
    catalog = _catalog(args, cfg)
    trace = load_trace(_require(args.trace, "trace"), catalog)
    D = args.D or cfg.D
    events = locate_obvious_events(trace, D=D)
    ts = prepare_training_set(trace, events, n_side=args.n_side or cfg.n_side, idle_share=cfg.idle_share,
                              min_similarity=cfg.min_similarity,
                              seed=args.seed if args.seed is not None else cfg.sample_seed)
    out = _out(args, "samples.bin")
    save_samples(ts, out, [s.name for s in catalog])
    _print({"path": out, "samples": len(ts), **ts.info})
    return 0


def cmd_train(args) -> int:
    from dataclasses import replace

    from .experiment import calibrate
    from .model import save, train
    from .pipeline import load_samples
    from .simulate import load_trace

    cfg = _config(args)
    ts = load_samples(_require(args.samples, "training samples"))
    mc = cfg.model
    mc = replace(mc, n_trees=args.trees or mc.n_trees, max_depth=args.depth or mc.max_depth,
                 learning_rate=args.lr or mc.learning_rate,
                 seed=args.seed if args.seed is not None else mc.seed)
    model = train(ts.features, ts.labels, mc, 2 * ts.n_appliances + 1)
    D = args.D or cfg.D
    thresholds = None
    if args.trace:
        trace = load_trace(_require(args.trace, "calibration trace"), _catalog(args, cfg))
        thresholds = calibrate(cfg, model, trace, D)
    out = _out(args, "model.hwkm")
    save(model, thresholds, out, {"D": D, "n_appliances": ts.n_appliances})
    _print({"path": out, "trees": len(model.trees), "samples": len(ts), "D": D,
            "thresholds": None if thresholds is None else thresholds.tolist()})
    return 0


def _report_dict(r) -> dict:
    return {"cycle_id": int(r.cycle_id), "class_label": int(r.class_label), "vote_count": int(r.vote_count),
            "appliance_id": int(r.appliance_id), "action": r.action, "fired_at": int(r.fired_at)}


def load_reports(path) -> list[tuple[int, int]]:
    from .errors import FormatError

    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append((int(rec["cycle_id"]), int(rec["class_label"])))
            except (ValueError, KeyError, TypeError) as exc:
                raise FormatError(f"{path}:{n}: malformed report: {exc}") from exc
    return out


def cmd_infer(args) -> int:
    import numpy as np

    from .errors import ParameterError
    from .model import load
    from .pipeline import StreamRecognizer
    from .simulate import load_trace

    model, thresholds, extra = load(_require(args.model, "model"))
    if thresholds is None:
        raise ParameterError("model file carries no voting thresholds; train with --trace")
    D = int(extra.get("D", 30))
    trace = load_trace(_require(args.trace, "trace"))
    rec = StreamRecognizer(model, thresholds, D, trace.grid.mains_hz, trace.grid.sample_rate_hz)
    lat = np.zeros(len(trace))
    reports = []
    for i, frame in enumerate(trace.frames()):
        t0 = time.perf_counter()
        r = rec.step(frame)
        lat[i] = time.perf_counter() - t0
        if r is not None:
            reports.append(r)
    out = _out(args, "reports.jsonl")
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        for r in reports:
            fh.write(json.dumps(_report_dict(r), sort_keys=True) + "\n")
    mean_ms = float(lat.mean() * 1e3) if len(lat) else 0.0
    budget_ms = 1e3 / trace.grid.mains_hz
    summary = {"path": out, "reports": len(reports), "cycles": len(trace), "mean_latency_ms": mean_ms,
               "p99_latency_ms": float(np.percentile(lat, 99) * 1e3) if len(lat) else 0.0,
               "max_latency_ms": float(lat.max() * 1e3) if len(lat) else 0.0,
               "budget_ms": budget_ms, "real_time": mean_ms < budget_ms}
    if not summary["real_time"]:
        print(f"warning: mean latency {mean_ms:.2f} ms exceeds the {budget_ms:.0f} ms cycle", file=sys.stderr)
    _print(summary)
    return 0


def cmd_eval(args) -> int:
    from . import metrics
    from .experiment import truth_events
    from .simulate import load_trace

    trace = load_trace(_require(args.trace, "trace"))
    predicted = load_reports(_require(args.reports, "reports"))
    tol = args.tolerance if args.tolerance is not None else metrics.DEFAULT_TOLERANCE
    n = trace.n_appliances
    rep = metrics.event_report(truth_events(trace), predicted, tol, classes=range(2 * n))
    est = metrics.states_from_reports(predicted, int(trace.labels[0]), len(trace), n, trace.first_cycle)
    rep.state_f1 = float(metrics.state_f1(est, trace.label_bits()).mean())
    bits = trace.label_bits()
    events = [a for _, a, _ in trace.events()]
    import numpy as np
    br = metrics.balance_ratios(np.bincount(events, minlength=n), bits.sum(axis=0), len(trace))
    rep.event_br, rep.state_br, rep.avg_on_off_br = br
    div = metrics.diversity(trace, trace.grid.mains_hz)
    rep.unique_states, rep.diversity_density = div.unique_states, div.diversity_density
    out = _out(args, "metrics.json")
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(rep.to_json())
    if args.csv:
        with open(args.csv, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(rep.to_csv())
    _print({"path": out, "average_f1": rep.average_f1, "weighted_f1": rep.weighted_f1, "state_f1": rep.state_f1})
    return 0


def cmd_sync_sim(args) -> int:
    from dataclasses import replace

    from . import syncsim

    cfg = syncsim.SyncConfig()
    a, b = syncsim.DEFAULT_CLOCK_A, syncsim.DEFAULT_CLOCK_B
    if args.clock_config:
        with open(_require(args.clock_config, "clock config"), encoding="utf-8") as fh:
            doc = json.load(fh)
        a = syncsim.NodeClock.from_dict(doc.get("node_a", {}))
        b = syncsim.NodeClock.from_dict(doc.get("node_b", {}))
        cfg = replace(cfg, **doc.get("sync", {}))
    if args.jitter:
        a, b = syncsim.with_jitter(a, args.jitter), syncsim.with_jitter(b, args.jitter)
    if args.no_noise:
        # ideal case: one shared clock, clean voltage, no timestamp jitter
        a = b = syncsim.NodeClock()
        cfg = replace(cfg, voltage_noise_rel=0.0, beacon_error_prob=0.0, cable_delay_us=0.0)
    if args.cable_delay_us is not None:
        cfg = replace(cfg, cable_delay_us=args.cable_delay_us)
    res = syncsim.simulate(args.trials, a, b, cfg, seed=args.seed if args.seed is not None else 0)
    out = args.out or "sync"
    os.makedirs(out, exist_ok=True)
    for name, trials in (("spt", res.spt), ("tsf", res.tsf)):
        with open(os.path.join(out, f"{name}_cdf.csv"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(syncsim.cdf_to_csv(syncsim.error_cdf(trials)))
    summary = {"spt": syncsim.summary(res.spt), "tsf": syncsim.summary(res.tsf),
               "node_a": a.to_dict(), "node_b": b.to_dict(), "config": cfg.__dict__}
    summary["spt"]["flagged"] = int(summary["spt"]["flagged"])
    with open(os.path.join(out, "summary.json"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    _print({"out": out, "spt": summary["spt"], "tsf": summary["tsf"]})
    return 0


def cmd_ablate(args) -> int:
    import csv

    from .errors import ParameterError
    from .experiment import build, run_end_to_end, run_interval_sweep

    cfg = _config(args)
    if args.seed is not None:
        cfg.model.seed = args.seed
    try:
        intervals = [int(x) for x in args.intervals.split(",") if x.strip()]
    except ValueError as exc:
        raise ParameterError(f"bad --intervals: {args.intervals}") from exc
    if not intervals or min(intervals) < 1:
        raise ParameterError("intervals must be positive integers")
    art = build(cfg)
    rows = [dict(experiment="interval", variant="balanced", **r)
            for r in run_interval_sweep(cfg, intervals, art)]
    if args.balance:
        res = run_end_to_end(cfg, art, imbalanced=True)
        for variant, r in res.items():
            rows.append({"experiment": "balance", "variant": variant, "D": cfg.D, "average_f1": r["average_f1"],
                         "weighted_f1": r["weighted_f1"], "state_f1": r["state_f1"]})
    out = _out(args, "ablation.csv")
    cols = ["experiment", "variant", "D", "average_f1", "weighted_f1", "state_f1"]
    with open(out, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    _print({"path": out, "rows": rows})
    return 0


# --------------------------------------------------------------------------
# Parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--seed", type=int, help="override the stage's random seed")
    common.add_argument("--out", help="output path (a directory for sync-sim)")

    p = argparse.ArgumentParser(prog="loadid", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-schedule", parents=[common], help="generate a balanced event schedule")
    s.add_argument("--n-appliances", type=int, default=18)
    s.add_argument("--group-size", type=int, default=6)
    s.add_argument("--groups-active", type=int, default=3)
    s.add_argument("--rounds", type=int, default=30)
    s.add_argument("--dwell", type=int, default=1000, help="cycles between events")
    s.add_argument("--compare", help="another schedule; print the state overlap ratio against it")
    s.set_defaults(func=cmd_gen_schedule)

    s = sub.add_parser("simulate", parents=[common], help="synthesize a labeled trace from a schedule")
    s.add_argument("--schedule", required=True)
    s.add_argument("--catalog")
    s.add_argument("--keep-individual", action="store_true", help="store per-appliance currents")
    s.add_argument("--noise-std", type=float, help="background noise std in amperes")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("prepare", parents=[common], help="build training samples from a trace")
    s.add_argument("--trace", required=True)
    s.add_argument("--catalog")
    s.add_argument("--n-side", type=int)
    s.add_argument("--D", type=int, help="differential interval")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", parents=[common], help="train the classifier and calibrate thresholds")
    s.add_argument("--samples", required=True)
    s.add_argument("--trace", help="labeled trace for threshold calibration")
    s.add_argument("--catalog")
    s.add_argument("--D", type=int, help="differential interval")
    s.add_argument("--trees", type=int)
    s.add_argument("--depth", type=int)
    s.add_argument("--lr", type=float)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", parents=[common], help="stream a trace through the recognizer")
    s.add_argument("--model", required=True)
    s.add_argument("--trace", required=True)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", parents=[common], help="score reports against a labeled trace")
    s.add_argument("--trace", required=True)
    s.add_argument("--reports", required=True)
    s.add_argument("--tolerance", type=int, help="event match tolerance in cycles")
    s.add_argument("--csv", help="also write per-class rows as CSV")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sync-sim", parents=[common], help="synchronization error Monte-Carlo")
    s.add_argument("--trials", type=int, default=2000)
    s.add_argument("--no-noise", action="store_true", help="identical ideal clocks and a clean voltage")
    s.add_argument("--jitter", help="timestamp jitter preset for both nodes, e.g. tsf_default")
    s.add_argument("--clock-config", help="JSON with node_a, node_b and sync sections")
    s.add_argument("--cable-delay-us", type=float)
    s.set_defaults(func=cmd_sync_sim)

    s = sub.add_parser("ablate", parents=[common], help="F1 versus differential interval and balance")
    s.add_argument("--intervals", default="10,20,30,40,50")
    s.add_argument("--balance", action="store_true", help="also compare balanced and skewed training")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    from .errors import LoadIdError

    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_thread_cap()
        return args.func(args)
    except LoadIdError as exc:
        print(f"loadid {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except UnicodeDecodeError as exc:
        print(f"loadid {args.command}: not a UTF-8 text file: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"loadid {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
