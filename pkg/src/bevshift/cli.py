"""Command-line entry point: ``bevshift {simulate,compare,dp,analyze}``."""

from __future__ import annotations

import argparse
import collections
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from bevshift.config import Setup, load_setup
from bevshift.cycles import load_cycle
from bevshift.errors import BevShiftError
from bevshift.harness import (
    STRATEGIES,
    SummaryReport,
    compare,
    load_cycles,
    ordering_gaps,
    run_strategy,
    summarize,
    trace_name,
)
from bevshift.relaxation import VERTEX_THRESHOLD
from bevshift.trace import SimulationTrace
from bevshift.transmission import SequenceCache

log = logging.getLogger("bevshift")


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON file overlaid on the default configuration")
    parser.add_argument("--max-iter", type=int, help="SQP iteration cap")
    parser.add_argument("--kkt-tol", type=float, help="SQP KKT tolerance")
    parser.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: out)")
    parser.add_argument("--no-figures", action="store_true", help="skip PNG figures")
    parser.add_argument("--dump-sequences", action="store_true",
                        help="write admissible gear sequences and per-step rounded plans to JSON")
    parser.add_argument("--dump-p", action="store_true",
                        help="write relaxed mode weights, their maximum and the rounding cost gap per step")
    parser.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bevshift", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run one strategy on one cycle")
    p.add_argument("--cycle", type=Path, required=True, help="t,v CSV file")
    p.add_argument("--strategy", choices=STRATEGIES, default="coopt")
    p.add_argument("--horizon", type=int, help="prediction horizon N (default from config)")
    _common(p)

    p = sub.add_parser("compare", help="run every strategy on every cycle in a directory")
    p.add_argument("--cycles", type=Path, required=True, help="directory of t,v CSV files")
    p.add_argument("--horizons", type=int, nargs="+", help="horizons for the optimizing strategies")
    p.add_argument("--strategies", nargs="+", choices=STRATEGIES, default=list(STRATEGIES))
    _common(p)

    p = sub.add_parser("dp", help="dynamic-programming benchmark on one cycle")
    p.add_argument("--cycle", type=Path, required=True)
    p.add_argument("--policy", type=Path, help="also write the value function and policy to this JSON file")
    _common(p)

    p = sub.add_parser("analyze", help="vertex-rate and timing statistics of a saved trace")
    p.add_argument("--trace", type=Path, required=True)
    p.add_argument("--threshold", type=float, default=VERTEX_THRESHOLD)
    return parser


def _setup(args) -> Setup:
    setup = load_setup(args.config)
    kw = {}
    if args.max_iter is not None:
        kw["max_iter"] = args.max_iter
    if args.kkt_tol is not None:
        kw["tol_kkt"] = args.kkt_tol
    return setup.with_sqp(**kw) if kw else setup


def _dump_debug(args, traces: dict[str, SimulationTrace], setup: Setup, horizons) -> None:
    out = args.out
    if args.dump_sequences:
        for n in horizons:
            cache = SequenceCache(n, setup.horizon.zeta_max, setup.gears)
            data = {"N": n, "zeta_max": setup.horizon.zeta_max, "admissible": json.loads(cache.to_json()),
                    "plans": {k: t.plans for k, t in traces.items() if t.plans and t.meta.get("N") == n}}
            (out / f"sequences_N{n}.json").write_text(json.dumps(data))
    if args.dump_p:
        for key, t in traces.items():
            if t.strategy != "coopt":
                continue
            rows = [{"step": k, "max_p": t.max_p[k], "cost_gap": t.cost_gap[k],
                     "p_bar": t.p_bar[k] if k < len(t.p_bar) else None} for k in range(t.steps)]
            rows = [{k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in r.items()}
                    for r in rows]
            (out / f"p_{key}.json").write_text(json.dumps(rows))


def cmd_simulate(args) -> int:
    setup = _setup(args)
    cycle = load_cycle(args.cycle)
    n = args.horizon if args.horizon is not None else setup.horizon.N
    n = None if args.strategy in ("baseline", "dp") else n
    args.out.mkdir(parents=True, exist_ok=True)
    report = SummaryReport()
    base = None
    try:
        base = run_strategy(cycle, "baseline", setup)
    except BevShiftError as exc:
        log.warning("baseline unavailable on %s: %s", cycle.name, exc)
    try:
        trace = base if args.strategy == "baseline" and base is not None else run_strategy(
            cycle, args.strategy, setup, n, keep_p=args.dump_p)
    except BevShiftError as exc:
        log.error("%s failed: %s", args.strategy, exc)
        return 1
    report.runs.append(summarize(trace, setup, n, base))
    name = trace_name(args.strategy, cycle.name)
    trace.to_json(args.out / f"{name}.json")
    trace.to_csv(args.out / f"{name}.csv")
    report.write(args.out)
    if not args.no_figures:
        from bevshift.plotting import plot_cycle

        plot_cycle(cycle, {args.strategy: trace}, setup, args.out)
    _dump_debug(args, {args.strategy: trace}, setup, [n] if n else [])
    r = report.runs[0]
    print(f"{r.strategy} on {r.cycle}: SOC consumption {r.soc_consumption_pct:.4f} %, "
          f"improvement {r.improvement_pct:.2f} %, shifts {r.shift_count}, "
          f"invariants {'ok' if r.invariants_ok else 'FAILED: ' + r.message}")
    return 0 if report.ok else 1


def cmd_compare(args) -> int:
    setup = _setup(args)
    cycles = load_cycles(args.cycles)
    if not cycles:
        log.error("no cycle files in %s", args.cycles)
        return 1
    horizons = tuple(args.horizons or setup.horizons)
    report = compare(cycles, setup, args.out, horizons, tuple(args.strategies),
                     figures=not args.no_figures, keep_p=args.dump_p)
    traces = {}
    if args.dump_sequences or args.dump_p:
        for c in cycles:
            for n in horizons:
                path = args.out / f"{trace_name('coopt', c.name, n if len(horizons) > 1 else None)}.json"
                if path.exists():
                    traces[f"coopt_N{n}_{c.name}"] = SimulationTrace.from_json(path)
    _dump_debug(args, traces, setup, horizons)
    for r in report.runs:
        print(f"{r.cycle:>12} {r.label:>12} {r.status:>7} SOC {r.soc_consumption_pct:8.4f} % "
              f"impr {r.improvement_pct:7.2f} % shifts {r.shift_count:3d} "
              f"{'ok' if r.invariants_ok else r.message}")
    if 8 in horizons:
        for c in cycles:
            print(c.name, json.dumps(ordering_gaps(report, c.name, 8)))
    return 0 if report.ok else 1


def cmd_dp(args) -> int:
    from bevshift.dp import run_dp

    setup = _setup(args)
    cycle = load_cycle(args.cycle)
    args.out.mkdir(parents=True, exist_ok=True)
    try:
        base = run_strategy(cycle, "baseline", setup)
    except BevShiftError:
        base = None
    try:
        trace, policy = run_dp(cycle, setup)
    except BevShiftError as exc:
        log.error("dp failed: %s", exc)
        return 1
    report = SummaryReport([summarize(trace, setup, None, base)])
    name = trace_name("dp", cycle.name)
    trace.to_json(args.out / f"{name}.json")
    trace.to_csv(args.out / f"{name}.csv")
    report.write(args.out)
    if args.policy:
        policy.to_json(args.policy)
    if not args.no_figures:
        from bevshift.plotting import plot_cycle

        plot_cycle(cycle, {"dp": trace}, setup, args.out)
    r = report.runs[0]
    print(f"dp on {r.cycle}: SOC consumption {r.soc_consumption_pct:.4f} %, shifts {r.shift_count}")
    return 0 if report.ok else 1


def analyze_trace(trace: SimulationTrace, threshold: float = VERTEX_THRESHOLD) -> dict:
    """Summary statistics of a saved closed-loop trace."""
    st = np.asarray(trace.solve_time, float)
    mp = np.asarray(trace.max_p, float)
    finite = mp[np.isfinite(mp)]
    return {
        "strategy": trace.strategy,
        "cycle": trace.cycle,
        "steps": trace.steps,
        "soc_consumption_pct": trace.soc_consumption_pct,
        "shift_count": trace.shift_count,
        "vertex_rate": float(np.mean(finite > threshold)) if finite.size else None,
        "mean_max_p": float(finite.mean()) if finite.size else None,
        "avg_solve_s": float(st.mean()) if st.size else None,
        "worst_solve_s": float(st.max()) if st.size else None,
        "p95_solve_s": float(np.percentile(st, 95)) if st.size else None,
        "status_counts": dict(collections.Counter(trace.status)),
        "fallback_steps": int(sum(trace.fallback)),
        "slack_steps": int(sum(trace.slack)),
    }


def cmd_analyze(args) -> int:
    trace = SimulationTrace.from_json(args.trace)
    print(json.dumps(analyze_trace(trace, args.threshold), indent=1))
    return 0


COMMANDS = {"simulate": cmd_simulate, "compare": cmd_compare, "dp": cmd_dp, "analyze": cmd_analyze}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (BevShiftError, OSError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
