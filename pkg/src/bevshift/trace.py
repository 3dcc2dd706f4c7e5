"""Closed-loop traces, reference previews and plant stepping shared by all strategies."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from bevshift.cycles import DriveCycle
from bevshift.horizon import HorizonConfig, ReferencePreview
from bevshift.powertrain import Powertrain, PowertrainState, torque_limits, transition


def initial_gap(v0: float, cfg: HorizonConfig) -> float:
    """Mid-band headway distance for the trip start."""
    return 0.5 * (cfg.tau_min + cfg.tau_max) * (v0 + cfg.delta1)


def reference_distances(cycle: DriveCycle, s0: float) -> np.ndarray:
    """Preceding-vehicle positions, accumulated left to right like the preview."""
    s = np.empty(len(cycle))
    s[0] = s0
    acc = float(s0)
    for k in range(1, len(cycle)):
        acc = acc + float(cycle.speeds[k - 1]) * cycle.dt
        s[k] = acc
    return s


def preview_window(cycle: DriveCycle, t: int, N: int, s_ref_t: float) -> ReferencePreview:
    """Speeds ``t .. t+N`` (last speed held past the end) and their distances."""
    idx = np.minimum(np.arange(t, t + N + 1), len(cycle) - 1)
    return ReferencePreview.from_speeds(cycle.speeds[idx], s_ref_t, cycle.dt)


def plant_step(state: PowertrainState, t_m: float, ratio: float, pt: Powertrain):
    """Apply motor torque through an overall ratio; returns (next state, transition)."""
    tr = transition(state.s, state.v, state.soc, t_m, ratio, pt, strict=True)
    nxt = PowertrainState(float(tr.s), float(tr.v), float(np.clip(tr.soc, 0.0, 1.0)))
    return nxt, tr


@dataclass
class SimulationTrace:
    """States have one more sample than the per-step controls."""

    strategy: str
    cycle: str
    dt: float
    v_ref: list = field(default_factory=list)
    s_ref: list = field(default_factory=list)
    v: list = field(default_factory=list)
    s: list = field(default_factory=list)
    soc: list = field(default_factory=list)
    gear: list = field(default_factory=list)  # 0 marks the fixed single reduction
    ratio: list = field(default_factory=list)
    t_m: list = field(default_factory=list)
    t_w: list = field(default_factory=list)
    p_b: list = field(default_factory=list)
    solve_time: list = field(default_factory=list)
    status: list = field(default_factory=list)
    max_p: list = field(default_factory=list)
    cost_gap: list = field(default_factory=list)
    slack: list = field(default_factory=list)
    fallback: list = field(default_factory=list)
    planned_shifts: list = field(default_factory=list)
    p_bar: list = field(default_factory=list)
    plans: list = field(default_factory=list)  # rounded gear plan per step (co-optimization)
    meta: dict = field(default_factory=dict)

    # -- recording ---------------------------------------------------------

    def start(self, state: PowertrainState, gear: int, v_ref: float, s_ref: float) -> None:
        self.v.append(state.v)
        self.s.append(state.s)
        self.soc.append(state.soc)
        self.gear.append(gear)
        self.v_ref.append(v_ref)
        self.s_ref.append(s_ref)

    def record(self, nxt: PowertrainState, tr, t_m: float, ratio: float, gear: int, next_gear: int,
               v_ref: float, s_ref: float, solve_time: float = 0.0, status: str = "", max_p: float = math.nan,
               cost_gap: float = math.nan, slack: bool = False, fallback: bool = False,
               planned_shifts: int = 0, p_bar=None, plan=None) -> None:
        self.gear[-1] = gear
        self.ratio.append(float(ratio))
        self.t_m.append(float(t_m))
        self.t_w.append(float(tr.t_w))
        self.p_b.append(float(tr.p_b))
        self.solve_time.append(float(solve_time))
        self.status.append(status)
        self.max_p.append(float(max_p))
        self.cost_gap.append(float(cost_gap))
        self.slack.append(bool(slack))
        self.fallback.append(bool(fallback))
        self.planned_shifts.append(int(planned_shifts))
        if p_bar is not None:
            self.p_bar.append([float(x) for x in p_bar])
        if plan is not None:
            self.plans.append([int(g) for g in plan])
        self.start(nxt, next_gear, v_ref, s_ref)

    # -- metrics -----------------------------------------------------------

    @property
    def steps(self) -> int:
        return len(self.t_m)

    @property
    def soc_consumption_pct(self) -> float:
        return 100.0 * (self.soc[0] - self.soc[-1])

    @property
    def distance(self) -> float:
        return self.s[-1] - self.s[0]

    @property
    def shift_count(self) -> int:
        g = [x for x in self.gear if x]
        return int(sum(a != b for a, b in zip(g, g[1:])))

    def vertex_rate(self, threshold: float = 0.95) -> float:
        mp = np.asarray(self.max_p, dtype=float)
        mp = mp[np.isfinite(mp)]
        return float(np.mean(mp > threshold)) if mp.size else math.nan

    def timing(self) -> tuple[float, float]:
        st = np.asarray(self.solve_time, dtype=float)
        return (float(st.mean()), float(st.max())) if st.size else (0.0, 0.0)

    def violations(self, cfg: HorizonConfig, pt: Powertrain) -> dict:
        """Worst closed-loop violation of headway, speed band and torque envelope."""
        if not self.steps:
            return {"headway": 0.0, "band": 0.0, "torque": 0.0}
        v = np.asarray(self.v)
        s = np.asarray(self.s)
        vr = np.asarray(self.v_ref)
        sr = np.asarray(self.s_ref)
        gap = sr[1:] - s[1:]
        head = np.maximum(cfg.tau_min * (v[1:] + cfg.delta1) - gap, gap - cfg.tau_max * (v[1:] + cfg.delta1))
        band = np.abs(v[1:] - vr[1:]) - cfg.band(vr[1:])
        w = v[:-1] / pt.vehicle.r_w * np.asarray(self.ratio)
        _, tmax = torque_limits(w, pt.motor, strict=False)
        torque = np.abs(np.asarray(self.t_m)) - tmax
        free = ~np.asarray(self.slack, dtype=bool)
        return {
            "headway": float(max(0.0, head.max())),
            "band": float(max(0.0, band[free].max(initial=0.0))),
            "band_slack_steps": int(np.sum(~free)),
            "torque": float(max(0.0, torque.max())),
        }

    # -- persistence -------------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(_finite(self.to_dict()), indent=1))

    @classmethod
    def from_json(cls, path) -> SimulationTrace:
        data = json.loads(Path(path).read_text())
        for key in ("max_p", "cost_gap"):
            data[key] = [math.nan if x is None else x for x in data.get(key, [])]
        return cls(**data)

    def to_csv(self, path) -> None:
        """Per-sample time series; control columns are blank on the final sample."""
        cols = ["t", "v_ref", "v", "s_ref", "s", "soc", "gear", "t_m", "t_w", "p_b", "solve_time", "max_p"]
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for k in range(len(self.v)):
                ctrl = k < self.steps
                w.writerow([
                    f"{k * self.dt:g}", f"{self.v_ref[k]:.6f}", f"{self.v[k]:.6f}", f"{self.s_ref[k]:.4f}",
                    f"{self.s[k]:.4f}", f"{self.soc[k]:.8f}", self.gear[k],
                    f"{self.t_m[k]:.4f}" if ctrl else "", f"{self.t_w[k]:.4f}" if ctrl else "",
                    f"{self.p_b[k]:.2f}" if ctrl else "", f"{self.solve_time[k]:.6f}" if ctrl else "",
                    "" if not ctrl or not math.isfinite(self.max_p[k]) else f"{self.max_p[k]:.6f}",
                ])


def _finite(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, np.generic):
        return _finite(obj.item())
    return obj
