"""Closed-loop co-optimization, strategy comparison and report emission."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from bevshift.baselines import FEAS_TOL, baseline_follow, run_sequential
from bevshift.config import Setup
from bevshift.cycles import DriveCycle, load_cycle
from bevshift.dp import run_dp
from bevshift.errors import BevShiftError, RoundingUnsound
from bevshift.horizon import MpcMemory, build_condensed, tracking_guess
from bevshift.powertrain import PowertrainState, torque_limits
from bevshift.relaxation import VERTEX_THRESHOLD, relax, round_solution
from bevshift.sqp import SqpSettings, SqpStatus, solve
from bevshift.trace import SimulationTrace, initial_gap, plant_step, preview_window, reference_distances
from bevshift.transmission import SequenceCache

log = logging.getLogger(__name__)

STRATEGIES = ("coopt", "dp", "single", "map", "baseline")
OPTIMIZING = ("coopt", "single", "map")
DISTANCE_TOL = 5.0
SCREEN = True
P_BLEND = 0.9  # warm-start weight on the previous rounded vertex


def _warm_p(n_v: int, idx: int) -> np.ndarray:
    p = np.full(n_v, (1.0 - P_BLEND) / n_v)
    p[idx] += P_BLEND
    return p


def _screen_modes(prog, rounded, seqs, table) -> tuple[int, np.ndarray, float] | None:
    """Cheapest feasible mode when the rounded plan's wheel torques are kept.

    The shared torque vector of the relaxation is a motor torque, so at the
    rounded solution every other gear sequence sees different wheel torques
    and looks worse than it is. Re-expressing the plan in each sequence at
    equal wheel torque exposes the gear efficiency difference.
    """
    n = len(seqs[0].positions) - 1
    ratios = np.array([[table.ratio(g) for g in s.positions[:n]] for s in seqs])
    wheel = rounded.u_bar[:n] * ratios[rounded.mode_index]
    best = None
    for j in range(len(seqs)):
        if j == rounded.mode_index:
            continue
        u_j = np.clip(wheel / ratios[j], prog.u_lower, prog.u_upper)
        b = prog.batch(u_j)
        f_j = float(b.f[j])
        if np.max(b.g[j], initial=0.0) <= FEAS_TOL and f_j < (best[2] if best else rounded.mode_cost):
            best = (j, u_j, f_j)
    return best


def run_coopt(cycle: DriveCycle, setup: Setup, N: int | None = None, settings: SqpSettings | None = None,
              keep_p: bool = False) -> SimulationTrace:
    """Receding-horizon speed and gearshift co-optimization over a cycle.

    Each step relaxes the mode-indexed program, solves it with SQP, rounds to
    the mode of largest weight, applies the first torque in the current gear
    and moves to the second gear of the rounded sequence.
    """
    pt, table = setup.powertrain, setup.gears
    hcfg = setup.horizon if N is None else setup.horizon_with(N)
    settings = settings or setup.sqp
    cache = SequenceCache(hcfg.N, hcfg.zeta_max, table)
    trace = SimulationTrace("coopt", cycle.name, cycle.dt)
    trace.meta = {"N": hcfg.N, "max_iter": settings.max_iter}
    if len(cycle) == 0:
        return trace
    v0 = float(cycle.speeds[0])
    s_ref = reference_distances(cycle, initial_gap(v0, hcfg))
    state = PowertrainState(0.0, v0, setup.soc0)
    gear = setup.start_gear
    trace.start(state, gear, v0, float(s_ref[0]))
    i_0, t_peak = pt.vehicle.i_0, pt.motor.T_peak
    prev_tw = 0.0
    u_warm = np.zeros(hcfg.N)
    p_idx = 0
    for t in range(len(cycle) - 1):
        preview = preview_window(cycle, t, hcfg.N, float(s_ref[t]))
        mem = MpcMemory(prev_tw, state, gear)
        seqs = cache[gear]
        p0 = _warm_p(len(seqs), p_idx)
        guess = tracking_guess(mem, preview, np.full(hcfg.N, table.ratio(gear) * i_0), pt)
        rounded, res, used_slack, elapsed = None, None, False, 0.0
        attempts = [(False, u_warm), (False, guess), (True, u_warm), (True, guess)]
        for slack, u0 in attempts:
            prog = build_condensed(mem, preview, hcfg, pt, table, cache, slack=slack, soc_weight=setup.soc_scale)
            nlp = relax(prog).as_nlp(cost_offset=-setup.soc_scale * state.soc)
            x0 = np.concatenate([u0 / t_peak, [0.0] if slack else [], p0])
            t0 = time.perf_counter()
            res = solve(nlp, x0, settings)
            elapsed += time.perf_counter() - t0
            # rounding re-checks feasibility in the chosen mode, so any iterate may be rounded
            if res.status is SqpStatus.INFEASIBLE:
                continue
            n_u = prog.n_u
            try:
                cand = round_solution(res.u_star[:n_u] * prog.u_scale, res.u_star[n_u:], prog)
            except RoundingUnsound:
                continue
            if cand.mode_violation <= FEAS_TOL:
                rounded, used_slack = cand, slack
                break
        if rounded is not None and not used_slack and SCREEN:
            better = _screen_modes(prog, rounded, seqs, table)
            if better is not None:
                j, u_j, f_j = better
                x0 = np.concatenate([u_j / t_peak, _warm_p(len(seqs), j)])
                t0 = time.perf_counter()
                res2 = solve(nlp, x0, settings)
                elapsed += time.perf_counter() - t0
                cand = None
                if res2.status is not SqpStatus.INFEASIBLE:
                    try:
                        cand = round_solution(res2.u_star[:prog.n_u] * prog.u_scale, res2.u_star[prog.n_u:], prog)
                    except RoundingUnsound:
                        cand = None
                if cand is not None and cand.mode_violation <= FEAS_TOL and cand.mode_cost < rounded.mode_cost:
                    rounded, res = cand, res2
        ratio = table.ratio(gear) * i_0
        if rounded is None:
            log.warning("coopt t=%d: no acceptable solution (%s); following the reference", t,
                        res.status.value if res else "none")
            w = state.v / pt.vehicle.r_w * ratio
            t_m = float(np.clip(guess[0], *torque_limits(w, pt.motor, strict=False)))
            next_gear, planned, max_p, gap, p_bar = gear, 0, math.nan, math.nan, None
            plan = [gear] * (hcfg.N + 1)
            u_warm = np.zeros(hcfg.N)
            p_idx_next = 0
        else:
            seq = seqs[rounded.mode_index]
            t_m = float(rounded.u_bar[0])
            next_gear = seq.positions[1]
            planned = seq.shift_count
            plan = seq.positions
            max_p, gap, p_bar = rounded.max_p, rounded.cost_gap, rounded.p_bar
            u = rounded.u_bar[: hcfg.N]
            u_warm = np.append(u[1:], u[-1])
            p_idx_next = cache.index(seq.shifted())
        nxt, tr = plant_step(state, t_m, ratio, pt)
        trace.record(
            nxt, tr, t_m, ratio, gear, next_gear, float(cycle.speeds[t + 1]), float(s_ref[t + 1]),
            solve_time=elapsed, status=res.status.value if res else "none", max_p=max_p, cost_gap=gap,
            slack=used_slack, fallback=rounded is None, planned_shifts=planned,
            p_bar=p_bar if keep_p else None, plan=plan,
        )
        # warm torques are motor torques; re-express them for the new gear
        if next_gear != gear:
            u_warm = u_warm * ratio / (table.ratio(next_gear) * i_0)
        state, gear, prev_tw, p_idx = nxt, next_gear, float(tr.t_w), p_idx_next
    return trace


def run_strategy(cycle: DriveCycle, strategy: str, setup: Setup, N: int | None = None,
                 settings: SqpSettings | None = None, keep_p: bool = False) -> SimulationTrace:
    if strategy == "coopt":
        return run_coopt(cycle, setup, N, settings, keep_p)
    if strategy in ("single", "map"):
        return run_sequential(cycle, setup, strategy, N, settings=settings)
    if strategy == "baseline":
        return baseline_follow(cycle, setup.powertrain, setup.single_gear, setup.soc0)
    if strategy == "dp":
        return run_dp(cycle, setup)[0]
    raise ValueError(f"unknown strategy {strategy!r}")


# ---------------------------------------------------------------------------
# reports


@dataclass
class RunSummary:
    cycle: str
    strategy: str
    N: int | None
    status: str
    soc_consumption_pct: float = math.nan
    improvement_pct: float = math.nan
    distance_m: float = math.nan
    distance_gap_m: float = math.nan
    shift_count: int = 0
    vertex_rate: float = math.nan
    fallback_steps: int = 0
    slack_steps: int = 0
    headway_violation: float = 0.0
    band_violation: float = 0.0
    torque_violation: float = 0.0
    invariants_ok: bool = True
    message: str = ""
    avg_solve_s: float = math.nan
    worst_solve_s: float = math.nan

    @property
    def label(self) -> str:
        return self.strategy if self.N is None else f"{self.strategy}_N{self.N}"


def improvement(base: float, value: float) -> float:
    """Relative SOC saving against the baseline, in percent."""
    return 100.0 * (base - value) / base


TIMING_FIELDS = ("avg_solve_s", "worst_solve_s")


@dataclass
class SummaryReport:
    runs: list = field(default_factory=list)

    def rows(self, timing: bool = True) -> list[dict]:
        out = []
        for r in self.runs:
            d = {k: v for k, v in r.__dict__.items() if timing or k not in TIMING_FIELDS}
            out.append(d)
        return out

    def find(self, cycle: str, strategy: str, N: int | None = None) -> RunSummary | None:
        for r in self.runs:
            if r.cycle == cycle and r.strategy == strategy and (N is None or r.N == N):
                return r
        return None

    @property
    def ok(self) -> bool:
        return all(r.status == "ok" and r.invariants_ok for r in self.runs)

    def write(self, out_dir: Path) -> None:
        """``report.json`` is deterministic; solve times go to ``timing.json`` and the CSV."""
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(json.dumps(_clean(self.rows(timing=False)), indent=1, sort_keys=True))
        timing = [{"cycle": r.cycle, "run": r.label, "avg_solve_s": r.avg_solve_s, "worst_solve_s": r.worst_solve_s}
                  for r in self.runs]
        (out_dir / "timing.json").write_text(json.dumps(_clean(timing), indent=1))
        rows = self.rows(timing=True)
        with (out_dir / "report.csv").open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["cycle"])
            w.writeheader()
            for r in rows:
                w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})


def _clean(obj):
    if isinstance(obj, float):
        return round(obj, 10) if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_clean(v) for v in obj]
    return obj


def summarize(trace: SimulationTrace, setup: Setup, N: int | None, base: SimulationTrace | None) -> RunSummary:
    hcfg = setup.horizon if N is None else setup.horizon_with(N)
    viol = trace.violations(hcfg, setup.powertrain)
    avg, worst = trace.timing()
    r = RunSummary(
        cycle=trace.cycle, strategy=trace.strategy, N=N, status="ok",
        soc_consumption_pct=trace.soc_consumption_pct, distance_m=trace.distance,
        shift_count=trace.shift_count, vertex_rate=trace.vertex_rate(VERTEX_THRESHOLD),
        fallback_steps=int(sum(trace.fallback)), slack_steps=int(sum(trace.slack)),
        headway_violation=viol["headway"], band_violation=viol["band"], torque_violation=viol["torque"],
        avg_solve_s=avg, worst_solve_s=worst,
    )
    if base is not None:
        r.improvement_pct = improvement(base.soc_consumption_pct, r.soc_consumption_pct)
        r.distance_gap_m = abs(r.distance_m - base.distance)
    problems = []
    if trace.strategy in OPTIMIZING:
        if max(r.headway_violation, r.band_violation, r.torque_violation) > FEAS_TOL:
            problems.append("constraint violation")
        if r.fallback_steps:
            problems.append(f"{r.fallback_steps} fallback steps")
        if base is not None and r.distance_gap_m > DISTANCE_TOL:
            problems.append(f"distance differs by {r.distance_gap_m:.2f} m")
    gears = [g for g in trace.gear if g]
    if any(abs(a - b) > 1 for a, b in zip(gears, gears[1:])):
        problems.append("gear skip")
    if trace.strategy == "coopt" and any(p > hcfg.zeta_max for p in trace.planned_shifts):
        problems.append("shift budget exceeded in a plan")
    r.invariants_ok = not problems
    r.message = "; ".join(problems)
    return r


def trace_name(strategy: str, cycle: str, N: int | None = None) -> str:
    tag = strategy if N is None else f"{strategy}-N{N}"
    return f"trace_{tag}_{cycle}"


def compare(cycles: list[DriveCycle], setup: Setup, out_dir=None, horizons=None,
            strategies=STRATEGIES, figures: bool = True, keep_p: bool = False) -> SummaryReport:
    """Run every strategy on every cycle; failures are recorded per run, not raised."""
    horizons = tuple(horizons or setup.horizons)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    report = SummaryReport()
    for cycle in cycles:
        traces: dict[str, SimulationTrace] = {}
        runs: list[tuple[str, int | None]] = []
        for s in ("baseline", "dp"):
            if s in strategies:
                runs.append((s, None))
        for n in horizons:
            for s in ("single", "map", "coopt"):
                if s in strategies:
                    runs.append((s, n))
        base = None
        for strategy, n in runs:
            t0 = time.perf_counter()
            try:
                trace = run_strategy(cycle, strategy, setup, n, keep_p=keep_p)
            except BevShiftError as exc:
                log.error("%s on %s failed: %s", strategy, cycle.name, exc)
                report.runs.append(RunSummary(cycle.name, strategy, n, "failed", invariants_ok=False,
                                              message=f"{type(exc).__name__}: {exc}"))
                continue
            log.info("%s N=%s on %s: %.3f %% SOC in %.1f s", strategy, n, cycle.name,
                     trace.soc_consumption_pct, time.perf_counter() - t0)
            if strategy == "baseline":
                base = trace
            traces[strategy if n is None else f"{strategy}_N{n}"] = trace
            report.runs.append(summarize(trace, setup, n, base))
            if out is not None:
                name = trace_name(strategy, cycle.name, n if len(horizons) > 1 else None)
                trace.to_json(out / f"{name}.json")
                trace.to_csv(out / f"{name}.csv")
        if out is not None and figures and traces:
            from bevshift.plotting import plot_cycle

            plot_cycle(cycle, traces, setup, out)
    if out is not None:
        report.write(out)
    return report


def load_cycles(directory, dt: float = 1.0) -> list[DriveCycle]:
    paths = sorted(Path(directory).glob("*.csv"))
    return [load_cycle(p, dt) for p in paths]


def ordering_gaps(report: SummaryReport, cycle: str, N: int = 8) -> dict:
    """Consumption per strategy and relative gaps along the expected ordering."""
    order = [("dp", None), ("coopt", N), ("map", N), ("single", N), ("baseline", None)]
    vals = {}
    for s, n in order:
        r = report.find(cycle, s, n)
        vals[s] = r.soc_consumption_pct if r is not None and r.status == "ok" else math.nan
    gaps = {}
    for (a, _), (b, _) in zip(order[1:], order[2:]):
        gaps[f"{a}<{b}"] = (vals[b] - vals[a]) / vals[b] if vals[b] else math.nan
    gaps["dp<=coopt"] = vals["coopt"] - vals["dp"]
    return {"values": vals, "gaps": gaps}
