"""Comparison strategies: exact reference following, single-gear speed
optimization, and speed optimization combined with a static shift map."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from bevshift.cycles import DriveCycle
from bevshift.errors import ConfigError, EnvelopeExceeded, ModelDomainError
from bevshift.horizon import HorizonConfig, MpcMemory, ReferencePreview, build_fixed_ratio, tracking_guess
from bevshift.powertrain import Powertrain, PowertrainState, inverse_wheel_torque, torque_limits
from bevshift.sqp import SqpResult, SqpSettings, solve, usable
from bevshift.trace import SimulationTrace, initial_gap, plant_step, preview_window, reference_distances

if TYPE_CHECKING:
    from bevshift.config import Setup

log = logging.getLogger(__name__)

FEAS_TOL = 1e-6


@dataclass(frozen=True)
class SingleGearConfig:
    i_g_s: float = 7.2  # overall reduction, replaces i_g * i_0
    w1p: float = 1.0
    w2p: float = 1e-3

    def __post_init__(self):
        if not self.i_g_s > 0:
            raise ConfigError("single reduction ratio must be > 0")
        if self.w1p < 0 or self.w2p < 0:
            raise ConfigError("single-gear weights must be >= 0")


@dataclass(frozen=True)
class ShiftMap:
    """Hysteresis map; boundary ``b`` separates gear ``b + 1`` from gear ``b + 2``.

    Threshold speeds are tabulated over wheel-torque demand and interpolated
    linearly; negative demand uses the zero-demand thresholds.
    """

    torque_breakpoints: tuple[float, ...]
    upshift_speed: tuple[tuple[float, ...], ...]
    downshift_speed: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        tb = tuple(float(x) for x in self.torque_breakpoints)
        up = tuple(tuple(float(x) for x in row) for row in self.upshift_speed)
        down = tuple(tuple(float(x) for x in row) for row in self.downshift_speed)
        object.__setattr__(self, "torque_breakpoints", tb)
        object.__setattr__(self, "upshift_speed", up)
        object.__setattr__(self, "downshift_speed", down)
        if any(a >= b for a, b in zip(tb, tb[1:])):
            raise ConfigError("torque breakpoints must be strictly increasing")
        if len(up) != len(down):
            raise ConfigError("need one downshift curve per upshift curve")
        for u, d in zip(up, down):
            if len(u) != len(tb) or len(d) != len(tb):
                raise ConfigError("threshold curves must match the torque breakpoints")
            if any(di >= ui for ui, di in zip(u, d)):
                raise ConfigError("downshift threshold must lie below the upshift threshold")
            if any(a > b for a, b in zip(u, u[1:])) or any(a > b for a, b in zip(d, d[1:])):
                raise ConfigError("thresholds must be nondecreasing in torque demand")

    @property
    def n_gears(self) -> int:
        return len(self.upshift_speed) + 1

    def up(self, boundary: int, t_w: float) -> float:
        return float(np.interp(max(t_w, 0.0), self.torque_breakpoints, self.upshift_speed[boundary]))

    def down(self, boundary: int, t_w: float) -> float:
        return float(np.interp(max(t_w, 0.0), self.torque_breakpoints, self.downshift_speed[boundary]))

    @classmethod
    def frozen_gear(cls, n_gears: int) -> ShiftMap:
        """A map whose thresholds are out of reach, so the gear never changes."""
        return cls((0.0,), tuple((1e9,) for _ in range(n_gears - 1)), tuple((-1e9,) for _ in range(n_gears - 1)))


def shift_map_select(v: float, t_w_demand: float, current: int, smap: ShiftMap) -> int:
    """Next gear from the map, moving at most one position."""
    if current < smap.n_gears and v > smap.up(current - 1, t_w_demand):
        return current + 1
    if current > 1 and v < smap.down(current - 2, t_w_demand):
        return current - 1
    return current


def baseline_follow(cycle: DriveCycle, pt: Powertrain, cfg: SingleGearConfig, soc0: float = 0.8) -> SimulationTrace:
    """Track the reference exactly through the single reduction.

    Raises:
        EnvelopeExceeded: when a step needs torque outside the motor envelope.
    """
    trace = SimulationTrace("baseline", cycle.name, cycle.dt)
    if len(cycle) == 0:
        return trace
    state = PowertrainState(0.0, float(cycle.speeds[0]), soc0)
    s_ref = reference_distances(cycle, 0.0)
    trace.start(state, 0, float(cycle.speeds[0]), float(s_ref[0]))
    R = cfg.i_g_s
    for k in range(len(cycle) - 1):
        t_w = float(inverse_wheel_torque(state.v, float(cycle.speeds[k + 1]), pt.vehicle))
        t_m = t_w / R
        w = state.v / pt.vehicle.r_w * R
        try:
            _, tmax = torque_limits(w, pt.motor)
        except ModelDomainError as exc:
            raise EnvelopeExceeded(str(exc), step=k) from exc
        if abs(t_m) > tmax + 1e-9:
            raise EnvelopeExceeded(f"needs {t_m:.1f} N m, limit {tmax:.1f} N m", step=k)
        nxt, tr = plant_step(state, t_m, R, pt)
        trace.record(nxt, tr, t_m, R, 0, 0, float(cycle.speeds[k + 1]), float(s_ref[k + 1]))
        state = nxt
    return trace


@dataclass
class FixedRatioSolve:
    u: np.ndarray  # motor torques at the given ratio
    result: SqpResult | None
    slack: bool
    wall_time: float


def optimize_speed_single_gear(mem: MpcMemory, preview: ReferencePreview, cfg: SingleGearConfig,
                               hcfg: HorizonConfig, pt: Powertrain, settings: SqpSettings | None = None,
                               u0=None, ratio: float | None = None) -> FixedRatioSolve:
    """Receding-horizon tracking/smoothing problem with a constant overall ratio.

    The torque trajectory is returned as motor torque for ``ratio`` (default
    ``cfg.i_g_s``).  If the hard speed band cannot be met, the problem is
    re-solved with the shared band slack.  ``u`` is ``None`` only when both
    attempts fail.
    """
    settings = settings or SqpSettings()
    R = cfg.i_g_s if ratio is None else ratio
    t_peak = pt.motor.T_peak
    guess = tracking_guess(mem, preview, np.full(hcfg.N, R), pt)
    starts = [guess] if u0 is None else [np.asarray(u0, float)[: hcfg.N], guess]
    t0 = time.perf_counter()
    res = None
    for slack in (False, True):
        prog = build_fixed_ratio(mem, preview, hcfg, pt, R, soc_weight=0.0, w1=cfg.w1p, w2=cfg.w2p, slack=slack)
        nlp = prog.mode_nlp(0)
        for x0 in starts:
            start = x0 / t_peak if not slack else np.append(x0 / t_peak, 0.0)
            res = solve(nlp, start, settings)
            if usable(res, FEAS_TOL):
                u = res.u_star[: hcfg.N] * t_peak
                return FixedRatioSolve(u, res, slack, time.perf_counter() - t0)
    return FixedRatioSolve(None, res, True, time.perf_counter() - t0)


def run_sequential(cycle: DriveCycle, setup: Setup, strategy: str = "single", N: int | None = None,
                   smap: ShiftMap | None = None, settings: SqpSettings | None = None) -> SimulationTrace:
    """Closed loop for ``single`` (fixed reduction) or ``map`` (shift map) strategies.

    Each step optimizes wheel torque with the ratio in force, then (for the
    map) picks the gear for this step from the current speed and the planned
    wheel torque, and converts back to motor torque through that gear.
    """
    if strategy not in ("single", "map"):
        raise ValueError(f"unknown sequential strategy {strategy!r}")
    pt, table = setup.powertrain, setup.gears
    hcfg = setup.horizon if N is None else setup.horizon_with(N)
    settings = settings or setup.sqp
    smap = smap or setup.shift_map
    cfg = setup.single_gear
    trace = SimulationTrace(strategy, cycle.name, cycle.dt)
    trace.meta = {"N": hcfg.N}
    if len(cycle) == 0:
        return trace
    v0 = float(cycle.speeds[0])
    s_ref = reference_distances(cycle, initial_gap(v0, hcfg))
    state = PowertrainState(0.0, v0, setup.soc0)
    gear = _map_start_gear(v0, smap) if strategy == "map" else 0
    trace.start(state, gear, v0, float(s_ref[0]))
    i_0 = pt.vehicle.i_0
    prev_tw = 0.0
    u_warm = None
    for t in range(len(cycle) - 1):
        ratio = cfg.i_g_s if strategy == "single" else table.ratio(gear) * i_0
        preview = preview_window(cycle, t, hcfg.N, float(s_ref[t]))
        mem = MpcMemory(prev_tw, state, max(gear, 1))
        sol = optimize_speed_single_gear(mem, preview, cfg, hcfg, pt, settings, u_warm, ratio)
        fallback = sol.u is None
        if fallback:
            log.warning("%s t=%d: solver failed (%s); following the reference", strategy, t,
                        sol.result.status.value if sol.result else "none")
            t_w = float(tracking_guess(mem, preview, np.full(hcfg.N, ratio), pt)[0]) * ratio
            u_warm = None
        else:
            t_w = float(sol.u[0]) * ratio
            u_warm = np.append(sol.u[1:], sol.u[-1])
        use_gear = gear
        if strategy == "map":
            cand = shift_map_select(state.v, t_w, gear, smap)
            if cand != gear and _fits_envelope(state.v, t_w, table.ratio(cand) * i_0, pt):
                use_gear = cand
                if u_warm is not None:
                    u_warm = u_warm * ratio / (table.ratio(cand) * i_0)
            ratio = table.ratio(use_gear) * i_0
        t_m = t_w / ratio
        if fallback:
            w = state.v / pt.vehicle.r_w * ratio
            t_m = float(np.clip(t_m, *torque_limits(w, pt.motor, strict=False)))
        nxt, tr = plant_step(state, t_m, ratio, pt)
        trace.record(
            nxt, tr, t_m, ratio, use_gear, use_gear, float(cycle.speeds[t + 1]), float(s_ref[t + 1]),
            solve_time=sol.wall_time, status=sol.result.status.value if sol.result else "none",
            slack=sol.slack and not fallback, fallback=fallback,
        )
        state, gear, prev_tw = nxt, use_gear, float(tr.t_w)
    return trace


def _map_start_gear(v: float, smap: ShiftMap) -> int:
    g = 1
    while g < smap.n_gears and v > smap.up(g - 1, 0.0):
        g += 1
    return g


def _fits_envelope(v: float, t_w: float, ratio: float, pt: Powertrain) -> bool:
    w = v / pt.vehicle.r_w * ratio
    if w > pt.motor.w_max:
        return False
    _, tmax = torque_limits(w, pt.motor)
    return abs(t_w / ratio) <= tmax
