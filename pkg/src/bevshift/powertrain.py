"""Longitudinal vehicle, battery and motor models with their Euler discretization.

Every function accepts scalars or NumPy arrays and broadcasts, so the horizon
rollout can push all gear-sequence modes through the same arithmetic that the
closed-loop plant uses.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, NamedTuple

import numpy as np
from scipy.interpolate import CubicSpline, RectBivariateSpline

from bevshift.errors import BatteryLimitExceeded, ConfigError, MotorOverspeed

# floor on motor speed inside the constant-power torque limit
W_EPS = 1e-6
# smallest discriminant used when evaluating outside the battery domain
_DISC_FLOOR = 1e-9


def smooth_clip(x, lo: float, hi: float, blend: float):
    """C1 clip of ``x`` to ``[lo, hi]`` with quadratic blends of half-width ``blend``.

    Returns:
        Tuple ``(value, derivative)``.
    """
    x = np.asarray(x, dtype=float)
    h = blend
    val = np.clip(x, lo, hi)
    der = ((x > lo) & (x < hi)).astype(float)
    if h > 0:
        low = (x > lo - h) & (x < lo + h)
        z = x - lo + h
        val = np.where(low, lo + z * z / (4 * h), val)
        der = np.where(low, z / (2 * h), der)
        high = (x > hi - h) & (x < hi + h)
        z = hi + h - x
        val = np.where(high, hi - z * z / (4 * h), val)
        der = np.where(high, z / (2 * h), der)
    return val, der


# ---------------------------------------------------------------------------
# maps


@dataclass(frozen=True)
class AffineMap:
    """``y = intercept + slope * x``."""

    intercept: float
    slope: float

    def __call__(self, x):
        return self.intercept + self.slope * np.asarray(x, dtype=float)

    def derivative(self, x):
        return np.zeros_like(np.asarray(x, dtype=float)) + self.slope


@dataclass(frozen=True)
class CubicMap1D:
    """C2 cubic-spline map through tabulated points."""

    grid: tuple[float, ...]
    values: tuple[float, ...]
    _spline: Any = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.grid) < 2 or len(self.grid) != len(self.values):
            raise ConfigError("cubic map needs matching grid/values of length >= 2")
        object.__setattr__(self, "_spline", CubicSpline(self.grid, self.values))

    def __call__(self, x):
        return self._spline(np.asarray(x, dtype=float))

    def derivative(self, x):
        return self._spline(np.asarray(x, dtype=float), 1)


@dataclass(frozen=True)
class ConstantEfficiency:
    """Operating-point independent efficiency."""

    value: float

    def partials(self, t, w):
        t, w = np.broadcast_arrays(np.asarray(t, float), np.asarray(w, float))
        zero = np.zeros_like(t)
        return zero + self.value, zero, zero.copy()

    def __call__(self, t, w):
        return self.partials(t, w)[0]


@dataclass(frozen=True)
class LossModelEfficiency:
    """Motor efficiency from a quadratic loss model.

    ``eta = |P| / (|P| + k0 + k1 w^2 + k2 T^2)`` with ``P = T w``, passed
    through a C1 clip onto ``[lo, hi]``.  Iron/windage losses grow with speed
    and copper losses with torque, so each operating power has an efficient
    speed/torque split that a gear ratio can move the motor towards.
    """

    k0: float
    k1: float
    k2: float
    lo: float = 0.55
    hi: float = 0.96
    blend: float = 0.02

    def partials(self, t, w):
        t = np.asarray(t, dtype=float)
        w = np.asarray(w, dtype=float)
        at = np.abs(t)
        p = at * w
        loss = self.k0 + self.k1 * w * w + self.k2 * t * t
        den = p + loss
        raw = p / den
        draw_dt = (np.sign(t) * w * loss - p * 2 * self.k2 * t) / (den * den)
        draw_dw = (at * loss - p * 2 * self.k1 * w) / (den * den)
        eta, slope = smooth_clip(raw, self.lo, self.hi, self.blend)
        return eta, slope * draw_dt, slope * draw_dw

    def __call__(self, t, w):
        return self.partials(t, w)[0]


@dataclass(frozen=True)
class GridEfficiency:
    """Tabulated efficiency over (torque, speed) with bicubic interpolation."""

    t_grid: tuple[float, ...]
    w_grid: tuple[float, ...]
    table: tuple[tuple[float, ...], ...]
    _spline: Any = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        tab = np.asarray(self.table, dtype=float)
        if tab.shape != (len(self.t_grid), len(self.w_grid)):
            raise ConfigError("efficiency table shape must be (len(t_grid), len(w_grid))")
        spline = RectBivariateSpline(self.t_grid, self.w_grid, tab, kx=3, ky=3)
        object.__setattr__(self, "_spline", spline)

    def partials(self, t, w):
        t, w = np.broadcast_arrays(np.asarray(t, float), np.asarray(w, float))
        sp = self._spline
        eta = sp.ev(t, w)
        return eta, sp.ev(t, w, dx=1), sp.ev(t, w, dy=1)

    def __call__(self, t, w):
        return self.partials(t, w)[0]


def map_from_config(cfg: dict):
    """Build a map object from its JSON description."""
    kind = cfg.get("type")
    if kind == "affine":
        return AffineMap(float(cfg["intercept"]), float(cfg["slope"]))
    if kind == "cubic":
        return CubicMap1D(tuple(cfg["grid"]), tuple(cfg["values"]))
    if kind == "constant":
        return ConstantEfficiency(float(cfg["value"]))
    if kind == "loss_model":
        keys = ("k0", "k1", "k2", "lo", "hi", "blend")
        return LossModelEfficiency(**{k: float(cfg[k]) for k in keys if k in cfg})
    if kind == "grid":
        table = tuple(tuple(row) for row in cfg["table"])
        return GridEfficiency(tuple(cfg["t_grid"]), tuple(cfg["w_grid"]), table)
    raise ConfigError(f"unknown map type {kind!r}")


# ---------------------------------------------------------------------------
# parameter records


@dataclass(frozen=True)
class VehicleParams:
    m: float
    m_eff: float
    r_w: float
    rho: float
    A_f: float
    C_d: float
    g: float
    theta: float
    mu: float
    i_0: float
    dt: float

    def __post_init__(self):
        for name in ("m", "m_eff", "r_w", "rho", "A_f", "C_d", "g", "i_0", "dt"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"vehicle parameter {name} must be > 0")
        if self.mu < 0:
            raise ConfigError("rolling resistance coefficient must be >= 0")

    @property
    def drag_coeff(self) -> float:
        """Coefficient of v^2 in the deceleration."""
        return self.rho * self.A_f * self.C_d / (2.0 * self.m)

    @property
    def grade_accel(self) -> float:
        return self.g * (np.sin(self.theta) + self.mu * np.cos(self.theta))


@dataclass(frozen=True)
class BatteryParams:
    C: float
    eta_b_plus: float
    eta_b_minus: float
    v_oc_map: Any
    r_b_map: Any

    def __post_init__(self):
        if not self.C > 0:
            raise ConfigError("battery capacity must be > 0")
        if not 0 < self.eta_b_plus < 1:
            raise ConfigError("eta_b_plus must lie in (0, 1)")
        if not self.eta_b_minus > 1:
            raise ConfigError("eta_b_minus must be > 1")
        socs = np.linspace(0.0, 1.0, 11)
        if np.any(self.v_oc_map(socs) <= 0) or np.any(self.r_b_map(socs) <= 0):
            raise ConfigError("V_oc and R_b maps must be positive on [0, 1]")

    @property
    def capacity_as(self) -> float:
        """Capacity in ampere-seconds."""
        return 3600.0 * self.C


@dataclass(frozen=True)
class MotorParams:
    eta_m_map: Any
    T_peak: float
    P_peak: float
    w_max: float
    # regenerative branch: False multiplies by eta_m, True divides (literal form)
    regen_divides_efficiency: bool = False

    def __post_init__(self):
        for name in ("T_peak", "P_peak", "w_max"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"motor parameter {name} must be > 0")

    @property
    def base_speed(self) -> float:
        return self.P_peak / self.T_peak


@dataclass(frozen=True)
class Powertrain:
    """The three parameter records a plant evaluation needs."""

    vehicle: VehicleParams
    battery: BatteryParams
    motor: MotorParams


@dataclass(frozen=True)
class PowertrainState:
    s: float
    v: float
    soc: float

    def __post_init__(self):
        if self.v < 0:
            raise ValueError("speed must be >= 0")
        if not 0.0 <= self.soc <= 1.0:
            raise ValueError("soc must lie in [0, 1]")


@dataclass(frozen=True)
class PowertrainInput:
    t_m: float
    i_g: float

    def __post_init__(self):
        if not self.i_g > 0:
            raise ValueError("gear ratio must be > 0")


# ---------------------------------------------------------------------------
# model equations


def wheel_torque(t_m, i_g, params: VehicleParams):
    return np.asarray(t_m, dtype=float) * i_g * params.i_0


def motor_speed(v, i_g, params: VehicleParams):
    return np.asarray(v, dtype=float) / params.r_w * i_g * params.i_0


def accel(v, t_w, params: VehicleParams):
    v = np.asarray(v, dtype=float)
    return (
        np.asarray(t_w, dtype=float) / (params.r_w * params.m_eff)
        - params.drag_coeff * v * v
        - params.grade_accel
    )


def inverse_wheel_torque(v, v_next, params: VehicleParams):
    """Wheel torque that moves the speed from ``v`` to ``v_next`` in one step.

    A zero target is met by any torque at or below the stopping torque; the
    smaller of that torque and zero is returned, so coasting is preferred.
    """
    v = np.asarray(v, dtype=float)
    v_next = np.asarray(v_next, dtype=float)
    t_w = params.r_w * params.m_eff * ((v_next - v) / params.dt + params.drag_coeff * v * v + params.grade_accel)
    return np.where(v_next <= 0.0, np.minimum(t_w, 0.0), t_w)


def battery_power_partials(t_m, w_m, motor: MotorParams, batt: BatteryParams):
    """Battery power and its partials with respect to motor torque and speed."""
    t = np.asarray(t_m, dtype=float)
    w = np.asarray(w_m, dtype=float)
    eta, eta_t, eta_w = motor.eta_m_map.partials(t, w)
    pm = t * w
    drive = t >= 0
    # division form: P = t w / (eb * eta)
    eb = np.where(drive, batt.eta_b_plus, batt.eta_b_minus)
    p_div = pm / (eb * eta)
    dt_div = (w * eta - pm * eta_t) / (eb * eta * eta)
    dw_div = (t * eta - pm * eta_w) / (eb * eta * eta)
    if motor.regen_divides_efficiency:
        return p_div, dt_div, dw_div
    # multiplication form for regeneration: P = t w eta / eb-
    ebm = batt.eta_b_minus
    p_mul = pm * eta / ebm
    dt_mul = (w * eta + pm * eta_t) / ebm
    dw_mul = (t * eta + pm * eta_w) / ebm
    return (
        np.where(drive, p_div, p_mul),
        np.where(drive, dt_div, dt_mul),
        np.where(drive, dw_div, dw_mul),
    )


def battery_power(t_m, w_m, motor: MotorParams, batt: BatteryParams):
    return battery_power_partials(t_m, w_m, motor, batt)[0]


def soc_rate_partials(p_b, soc, batt: BatteryParams, strict: bool = True):
    """SOC rate [1/s] with partials with respect to battery power and SOC.

    With ``strict`` a negative discriminant raises; otherwise it is floored so
    optimizers can keep evaluating outside the battery's capability.
    """
    p = np.asarray(p_b, dtype=float)
    soc = np.asarray(soc, dtype=float)
    voc = batt.v_oc_map(soc)
    rb = batt.r_b_map(soc)
    dvoc = batt.v_oc_map.derivative(soc)
    drb = batt.r_b_map.derivative(soc)
    disc = voc * voc - 4.0 * rb * p
    if np.any(disc < 0):
        if strict:
            raise BatteryLimitExceeded(
                f"battery power {np.max(p):.1f} W exceeds capability"
            )
        disc = np.maximum(disc, _DISC_FLOOR)
    root = np.sqrt(disc)
    cs = batt.capacity_as
    rate = -(voc - root) / (2.0 * cs * rb)
    d_root = np.where(root > 0, 1.0 / np.where(root > 0, root, 1.0), 0.0)
    d_rate_dp = -d_root / cs
    droot_dsoc = (voc * dvoc - 2.0 * drb * p) * d_root
    d_rate_dsoc = -((dvoc - droot_dsoc) * rb - (voc - root) * drb) / (2.0 * cs * rb * rb)
    return rate, d_rate_dp, d_rate_dsoc


def soc_rate(p_b, soc, batt: BatteryParams, strict: bool = True):
    return soc_rate_partials(p_b, soc, batt, strict)[0]


def torque_limits_partials(w_m, motor: MotorParams, strict: bool = True):
    """``(T_min, T_max, dT_max/dw)``; outside the speed range only with ``strict=False``."""
    w = np.asarray(w_m, dtype=float)
    if strict and np.any(w > motor.w_max):
        raise MotorOverspeed(f"motor speed {np.max(w):.1f} rad/s above {motor.w_max}")
    wf = np.maximum(w, W_EPS)
    power_lim = motor.P_peak / wf
    tmax = np.minimum(motor.T_peak, power_lim)
    slope = np.where((power_lim < motor.T_peak) & (w > W_EPS), -motor.P_peak / (wf * wf), 0.0)
    return -tmax, tmax, slope


def torque_limits(w_m, motor: MotorParams, strict: bool = True):
    tmin, tmax, _ = torque_limits_partials(w_m, motor, strict)
    return tmin, tmax


class Transition(NamedTuple):
    """Next state plus the intermediate quantities of one Euler step."""

    s: Any
    v: Any
    soc: Any
    v_raw: Any
    w_m: Any
    t_w: Any
    p_b: Any
    rate: Any
    accel: Any


def transition(s, v, soc, t_m, ratio, pt: Powertrain, strict: bool = True) -> Transition:
    """Vectorized Euler step; ``ratio`` is the overall ratio ``i_g * i_0``."""
    veh = pt.vehicle
    v = np.asarray(v, dtype=float)
    w = v / veh.r_w * ratio
    if strict and np.any(w > pt.motor.w_max):
        raise MotorOverspeed(f"motor speed {np.max(w):.1f} rad/s above {pt.motor.w_max}")
    t_w = np.asarray(t_m, dtype=float) * ratio
    a = accel(v, t_w, veh)
    p_b = battery_power(t_m, w, pt.motor, pt.battery)
    rate = soc_rate(p_b, soc, pt.battery, strict=strict)
    v_raw = v + a * veh.dt
    return Transition(
        s=s + v * veh.dt,
        v=np.maximum(v_raw, 0.0),
        soc=soc + rate * veh.dt,
        v_raw=v_raw,
        w_m=w,
        t_w=t_w,
        p_b=p_b,
        rate=rate,
        accel=a,
    )


def step(state: PowertrainState, inp: PowertrainInput, pt: Powertrain) -> PowertrainState:
    """Advance the plant by one sampling period."""
    tr = transition(state.s, state.v, state.soc, inp.t_m, inp.i_g * pt.vehicle.i_0, pt)
    return PowertrainState(float(tr.s), float(tr.v), float(np.clip(tr.soc, 0.0, 1.0)))
