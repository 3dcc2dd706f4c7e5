"""Full-trip dynamic programming benchmark for minimum SOC consumption.

State per time step: speed node, headway gap ``e = s_r - s``, SOC and gear.
The speed axis of each step spans the admissible speed band around the
reference, and the control is the pair (next speed node, shift signal); the
motor torque follows by inverting the longitudinal dynamics.  Gap and SOC are
continuous and the value function is interpolated bilinearly in them.  Headway
and torque-envelope violations are priced by a linear penalty.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from bevshift.cycles import DriveCycle
from bevshift.errors import ConfigError, GridTooCoarse, LeftGridHull
from bevshift.horizon import HorizonConfig
from bevshift.powertrain import Powertrain, PowertrainState, battery_power, inverse_wheel_torque, torque_limits
from bevshift.trace import SimulationTrace, initial_gap, plant_step, reference_distances
from bevshift.transmission import GearTable

_INF = np.inf


@dataclass(frozen=True)
class DpSettings:
    n_v: int = 21
    n_gap: int = 21
    n_soc: int = 11
    penalty: float = 1e4
    soc_window: float = 0.06  # SOC axis spans [soc0 - window, soc0 + soc_headroom]
    soc_headroom: float = 0.005
    gap_margin: float = 1.0  # [m] beyond the widest headway band

    def __post_init__(self):
        if self.n_v < 2 or self.n_gap < 2 or self.n_soc < 2:
            raise ConfigError("DP axes need at least two nodes")
        if self.penalty < 0 or self.soc_window <= 0:
            raise ConfigError("DP penalty must be >= 0 and the SOC window > 0")


@dataclass(frozen=True)
class DpGrid:
    """Per-step speed and gap axes plus a shared SOC axis."""

    v_axes: tuple[np.ndarray, ...]
    gap_axes: tuple[np.ndarray, ...]
    soc_axis: np.ndarray
    gears: tuple[int, ...]
    penalty: float

    @classmethod
    def build(cls, v_ref, hcfg: HorizonConfig, table: GearTable, settings: DpSettings, soc0: float) -> DpGrid:
        v_ref = np.asarray(v_ref, float)
        band = hcfg.band(v_ref)
        v_axes, gap_axes = [], []
        for vr, b in zip(v_ref, band):
            va = np.linspace(max(0.0, vr - b), vr + b, settings.n_v)
            v_axes.append(va)
            lo = hcfg.tau_min * (va[0] + hcfg.delta1) - settings.gap_margin
            hi = hcfg.tau_max * (va[-1] + hcfg.delta1) + settings.gap_margin
            gap_axes.append(np.linspace(lo, hi, settings.n_gap))
        soc_axis = np.linspace(soc0 - settings.soc_window, min(1.0, soc0 + settings.soc_headroom), settings.n_soc)
        return cls(tuple(v_axes), tuple(gap_axes), soc_axis, tuple(range(1, table.eta_max + 1)), settings.penalty)


@dataclass
class DpPolicy:
    grid: DpGrid
    v_ref: np.ndarray
    value: list = field(default_factory=list)  # per t: (n_v, n_gap, n_soc, n_gear)
    argmin_v: list = field(default_factory=list)  # next speed node index
    argmin_zeta: list = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.v_ref) - 1

    def to_json(self, path) -> None:
        """Portable dump with base-ten floats."""
        data = {
            "v_ref": self.v_ref.tolist(),
            "soc_axis": self.grid.soc_axis.tolist(),
            "gears": list(self.grid.gears),
            "penalty": self.grid.penalty,
            "v_axes": [a.tolist() for a in self.grid.v_axes],
            "gap_axes": [a.tolist() for a in self.grid.gap_axes],
            "value": [np.where(np.isfinite(v), v, 1e300).tolist() for v in self.value],
            "argmin_v": [a.tolist() for a in self.argmin_v],
            "argmin_zeta": [a.tolist() for a in self.argmin_zeta],
        }
        Path(path).write_text(json.dumps(data))

    @classmethod
    def from_json(cls, path) -> DpPolicy:
        d = json.loads(Path(path).read_text())
        grid = DpGrid(tuple(np.array(a) for a in d["v_axes"]), tuple(np.array(a) for a in d["gap_axes"]),
                      np.array(d["soc_axis"]), tuple(d["gears"]), d["penalty"])
        val = [np.where(np.array(v) >= 1e300, _INF, np.array(v)) for v in d["value"]]
        return cls(grid, np.array(d["v_ref"]), val, [np.array(a) for a in d["argmin_v"]],
                   [np.array(a) for a in d["argmin_zeta"]])


def _frac_index(axis: np.ndarray, x, clamp: bool):
    """Lower cell index and in-cell fraction on a uniform axis."""
    h = axis[1] - axis[0]
    pos = (np.asarray(x, float) - axis[0]) / h
    if clamp:
        pos = np.clip(pos, 0.0, axis.size - 1)
    i0 = np.clip(np.floor(pos).astype(int), 0, axis.size - 2)
    return i0, pos - i0


def _stage(v, vr_t, v_next_axis, e, soc, ratio, pt: Powertrain, hcfg: HorizonConfig, penalty: float):
    """Successor gap/SOC and penalty for speed nodes ``v`` (shape a) to ``v_next_axis`` (b).

    ``e`` has shape (a, c) and ``soc`` shape (d,); returns
    ``e_next (a, c)``, ``soc_next (a, b, d)``, ``pen_torque (a, b)``, ``pen_head (a, c, b)``.
    Infeasible transitions (motor overspeed, battery limit) get ``inf`` penalty.
    """
    veh, motor, batt = pt.vehicle, pt.motor, pt.battery
    v = np.asarray(v, float)[:, None]
    vn = np.asarray(v_next_axis, float)[None, :]
    t_w = inverse_wheel_torque(v, vn, veh)
    t_m = t_w / ratio
    w = np.broadcast_to(v / veh.r_w * ratio, t_m.shape)
    _, tmax = torque_limits(w, motor, strict=False)
    pen_t = penalty * np.maximum(np.abs(t_m) - tmax, 0.0)
    pen_t = np.where(w > motor.w_max, _INF, pen_t)
    p_b = battery_power(t_m, w, motor, batt)
    socs = np.asarray(soc, float)[None, None, :]
    voc = batt.v_oc_map(socs)
    rb = batt.r_b_map(socs)
    disc = voc * voc - 4.0 * rb * p_b[:, :, None]
    root = np.sqrt(np.maximum(disc, 0.0))
    rate = -(voc - root) / (2.0 * batt.capacity_as * rb)
    soc_next = socs + rate * veh.dt
    soc_next = np.where(disc < 0, np.nan, soc_next)
    pen_t = np.where(np.any(disc < 0, axis=2), _INF, pen_t)
    e_next = e + (vr_t - v) * veh.dt
    lo = hcfg.tau_min * (v_next_axis[None, None, :] + hcfg.delta1)
    hi = hcfg.tau_max * (v_next_axis[None, None, :] + hcfg.delta1)
    en = e_next[:, :, None]
    pen_h = penalty * np.maximum(np.maximum(lo - en, en - hi), 0.0)
    return e_next, soc_next, pen_t, pen_h, t_m


def _lookup(V, gap_axis, soc_axis, e_next, soc_next):
    """Bilinear value at (node b, e_next[a, c], soc_next[a, b, d]) -> (a, c, d, b)."""
    je, fe = _frac_index(gap_axis, e_next, clamp=True)  # (a, c)
    # SOC extrapolates linearly: the value is close to affine in SOC
    ls, fs = _frac_index(soc_axis, np.nan_to_num(soc_next, nan=soc_axis[0]), clamp=False)  # (a, b, d)
    nb = V.shape[0]
    B = np.arange(nb)[None, None, None, :]
    JE = je[:, :, None, None]
    FE = fe[:, :, None, None]
    LS = ls.transpose(0, 2, 1)[:, None, :, :]
    FS = fs.transpose(0, 2, 1)[:, None, :, :]
    v00 = V[B, JE, LS]
    v01 = V[B, JE, LS + 1]
    v10 = V[B, JE + 1, LS]
    v11 = V[B, JE + 1, LS + 1]
    return (1 - FE) * ((1 - FS) * v00 + FS * v01) + FE * ((1 - FS) * v10 + FS * v11)


def solve_dp(cycle: DriveCycle, pt: Powertrain, table: GearTable, hcfg: HorizonConfig,
             settings: DpSettings | None = None, soc0: float = 0.8, grid: DpGrid | None = None) -> DpPolicy:
    """Backward induction from the terminal cost ``-SOC``."""
    settings = settings or DpSettings()
    v_ref = np.asarray(cycle.speeds, float)
    grid = grid or DpGrid.build(v_ref, hcfg, table, settings, soc0)
    T = v_ref.size
    G = len(grid.gears)
    soc_axis = grid.soc_axis
    n_s = soc_axis.size
    i_0 = pt.vehicle.i_0
    policy = DpPolicy(grid, v_ref)
    if T < 2:
        return policy
    values = [None] * T
    arg_v = [None] * (T - 1)
    arg_z = [None] * (T - 1)
    nv_T, ne_T = grid.v_axes[-1].size, grid.gap_axes[-1].size
    values[T - 1] = np.broadcast_to(-soc_axis[None, None, :, None], (nv_T, ne_T, n_s, G)).copy()
    for t in range(T - 2, -1, -1):
        va, ea, vn_axis = grid.v_axes[t], grid.gap_axes[t], grid.v_axes[t + 1]
        Vn = values[t + 1]
        n_v, n_e = va.size, ea.size
        best = np.full((n_v, n_e, n_s, G), _INF)
        bv = np.zeros((n_v, n_e, n_s, G), dtype=np.int16)
        bz = np.zeros((n_v, n_e, n_s, G), dtype=np.int8)
        e_grid = np.broadcast_to(ea[None, :], (n_v, n_e))
        for gi, g in enumerate(grid.gears):
            ratio = table.ratio(g) * i_0
            e_next, soc_next, pen_t, pen_h, _ = _stage(va, v_ref[t], vn_axis, e_grid, soc_axis, ratio, pt, hcfg,
                                                       grid.penalty)
            # stage penalties broadcast to (a, c, d, b)
            pen = pen_t[:, None, None, :] + pen_h[:, :, None, :]
            for z in (0, -1, 1):  # ties resolve to no shift, then downshift
                gn = g + z
                if gn not in grid.gears:
                    continue
                cand = pen + _lookup(Vn[..., grid.gears.index(gn)], grid.gap_axes[t + 1], soc_axis, e_next, soc_next)
                cand = np.where(np.isnan(cand), _INF, cand)
                j = np.argmin(cand, axis=3)
                c = np.take_along_axis(cand, j[..., None], axis=3)[..., 0]
                better = c < best[..., gi]
                best[..., gi] = np.where(better, c, best[..., gi])
                bv[..., gi] = np.where(better, j, bv[..., gi])
                bz[..., gi] = np.where(better, z, bz[..., gi])
        values[t] = best
        arg_v[t] = bv
        arg_z[t] = bz
    policy.value = values
    policy.argmin_v = arg_v
    policy.argmin_zeta = arg_z
    return policy


def _candidates(policy: DpPolicy, t: int, v: float, e: float, soc: float, gear: int, pt, table, hcfg):
    """Cost of every (next node, shift) pair from an off-grid state; shape (n_b, 3)."""
    grid = policy.grid
    vn_axis = grid.v_axes[t + 1]
    ratio = table.ratio(gear) * pt.vehicle.i_0
    e_next, soc_next, pen_t, pen_h, t_m = _stage(np.array([v]), policy.v_ref[t], vn_axis, np.array([[e]]),
                                                 np.array([soc]), ratio, pt, hcfg, grid.penalty)
    out = np.full((vn_axis.size, 3), _INF)
    for zi, z in enumerate((0, -1, 1)):
        gn = gear + z
        if gn not in grid.gears:
            continue
        val = _lookup(policy.value[t + 1][..., grid.gears.index(gn)], grid.gap_axes[t + 1], grid.soc_axis,
                      e_next, soc_next)[0, 0, 0]
        out[:, zi] = pen_t[0] + pen_h[0, 0] + val
    return np.where(np.isnan(out), _INF, out), t_m[0]


def value_at(policy: DpPolicy, v: float, e: float, soc: float, gear: int, pt, table, hcfg) -> float:
    """Optimal cost-to-go from an arbitrary initial state (one exact stage, then the table)."""
    if policy.steps < 1:
        return -soc
    cand, _ = _candidates(policy, 0, v, e, soc, gear, pt, table, hcfg)
    return float(cand.min())


def extract_trajectory(policy: DpPolicy, cycle: DriveCycle, pt: Powertrain, table: GearTable,
                       hcfg: HorizonConfig, soc0: float = 0.8, gear0: int = 1, hull_tol: float = 1e-6) -> SimulationTrace:
    """Forward simulation re-minimizing the stage at the actual state each step.

    Raises:
        LeftGridHull: the simulated state leaves the grid axes.
        GridTooCoarse: every control candidate is infeasible.
    """
    grid = policy.grid
    v0 = float(cycle.speeds[0])
    e0 = initial_gap(v0, hcfg)
    s_ref = reference_distances(cycle, e0)
    state = PowertrainState(0.0, v0, soc0)
    gear = gear0
    trace = SimulationTrace("dp", cycle.name, cycle.dt)
    trace.start(state, gear, v0, float(s_ref[0]))
    for t in range(policy.steps):
        e = float(s_ref[t] - state.s)
        va, ea = grid.v_axes[t], grid.gap_axes[t]
        if t > 0 and not (va[0] - hull_tol <= state.v <= va[-1] + hull_tol):
            raise LeftGridHull(f"speed {state.v:.3f} outside [{va[0]:.3f}, {va[-1]:.3f}]", step=t)
        if not (ea[0] - hull_tol <= e <= ea[-1] + hull_tol):
            raise LeftGridHull(f"gap {e:.3f} outside [{ea[0]:.3f}, {ea[-1]:.3f}]", step=t)
        if not (grid.soc_axis[0] - hull_tol <= state.soc <= grid.soc_axis[-1] + hull_tol):
            raise LeftGridHull(f"SOC {state.soc:.5f} outside the SOC axis", step=t)
        cand, t_m = _candidates(policy, t, state.v, e, state.soc, gear, pt, table, hcfg)
        flat = int(np.argmin(cand))
        if not np.isfinite(cand.flat[flat]):
            raise GridTooCoarse(f"no finite control at step {t}")
        b, zi = divmod(flat, 3)
        z = (0, -1, 1)[zi]
        ratio = table.ratio(gear) * pt.vehicle.i_0
        nxt, tr = plant_step(state, float(t_m[b]), ratio, pt)
        nxt = PowertrainState(nxt.s, float(grid.v_axes[t + 1][b]) if abs(nxt.v - grid.v_axes[t + 1][b]) < 1e-9 else nxt.v,
                              nxt.soc)
        trace.record(nxt, tr, float(t_m[b]), ratio, gear, gear + z, float(cycle.speeds[t + 1]), float(s_ref[t + 1]),
                     status="dp")
        state, gear = nxt, gear + z
    return trace


def run_dp(cycle: DriveCycle, setup) -> tuple[SimulationTrace, DpPolicy]:
    policy = solve_dp(cycle, setup.powertrain, setup.gears, setup.horizon, setup.dp, setup.soc0)
    if policy.steps < 1:
        trace = SimulationTrace("dp", cycle.name, cycle.dt)
        if len(cycle):
            trace.start(PowertrainState(0.0, float(cycle.speeds[0]), setup.soc0), setup.start_gear,
                        float(cycle.speeds[0]), 0.0)
        return trace, policy
    trace = extract_trajectory(policy, cycle, setup.powertrain, setup.gears, setup.horizon, setup.soc0,
                               setup.start_gear)
    return trace, policy
