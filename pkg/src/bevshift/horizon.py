"""Receding-horizon speed/gearshift problem in condensed, mode-indexed form.

For a fixed gear sequence the states are deterministic functions of the
motor-torque trajectory, so each sequence yields a smooth cost and constraint
vector in the torques alone.  All sequences of the admissible set are
evaluated together; the arrays carry a leading mode axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from bevshift.errors import ConfigError, MotorOverspeed
from bevshift.powertrain import (
    Powertrain,
    PowertrainState,
    battery_power_partials,
    inverse_wheel_torque,
    soc_rate_partials,
    torque_limits,
    torque_limits_partials,
)
from bevshift.sqp import NlpProblem
from bevshift.transmission import GearSequence, GearTable, SequenceCache

ROWS_PER_STEP = 6


@dataclass(frozen=True)
class HorizonConfig:
    N: int = 8
    w1: float = 5e-4
    w2: float = 2.5e-6
    tau_min: float = 1.0
    tau_max: float = 2.0
    delta1: float = 5.0
    delta2: float = 2.0
    epsilon: float = 0.1
    zeta_max: int = 1
    # linear price of the shared speed-band slack (cost units per m/s)
    slack_penalty: float = 10.0
    slack_max: float = 20.0

    def __post_init__(self):
        if self.N < 1:
            raise ConfigError("horizon N must be >= 1")
        if self.w1 < 0 or self.w2 < 0:
            raise ConfigError("cost weights must be >= 0")
        if not 0 < self.tau_min < self.tau_max:
            raise ConfigError("headway bounds need 0 < tau_min < tau_max")
        if self.delta1 <= 0 or self.delta2 <= 0:
            raise ConfigError("delta1 and delta2 must be > 0")
        if not 0 < self.epsilon < 1:
            raise ConfigError("epsilon must lie in (0, 1)")
        if self.zeta_max < 0:
            raise ConfigError("zeta_max must be >= 0")

    def band(self, v_ref):
        """Half-width of the admissible speed band around the reference."""
        return np.maximum(self.epsilon * np.asarray(v_ref, dtype=float), self.delta2)


@dataclass(frozen=True)
class ReferencePreview:
    """Predicted speeds and distances of the preceding vehicle, ``N + 1`` each."""

    v_ref: tuple[float, ...]
    s_ref: tuple[float, ...]

    def __post_init__(self):
        if len(self.v_ref) != len(self.s_ref) or len(self.v_ref) < 2:
            raise ValueError("v_ref and s_ref need equal length >= 2")
        if min(self.v_ref) < 0:
            raise ValueError("reference speeds must be >= 0")

    @classmethod
    def from_speeds(cls, v_ref: Sequence[float], s0: float, dt: float) -> ReferencePreview:
        s = [float(s0)]
        for v in v_ref[:-1]:
            s.append(s[-1] + float(v) * dt)
        return cls(tuple(float(v) for v in v_ref), tuple(s))

    def is_consistent(self, dt: float) -> bool:
        return all(
            self.s_ref[k + 1] == self.s_ref[k] + self.v_ref[k] * dt
            for k in range(len(self.v_ref) - 1)
        )

    @property
    def N(self) -> int:
        return len(self.v_ref) - 1


@dataclass(frozen=True)
class MpcMemory:
    prev_wheel_torque: float
    current_state: PowertrainState
    current_gear: int


class ModeBatch(NamedTuple):
    """Costs, constraints and their torque derivatives for every mode."""

    f: np.ndarray  # (n_v,)
    df: np.ndarray  # (n_v, n_u)
    g: np.ndarray  # (n_v, m)
    dg: np.ndarray  # (n_v, m, n_u)


@dataclass(frozen=True)
class CondensedProgram:
    """Finite-mode program ``min f(u, v) s.t. g(u, v) <= 0`` with ``v`` in ``0..n_v-1``."""

    n_u: int
    n_v: int
    m: int
    batch: Callable[[np.ndarray], ModeBatch]
    u_lower: np.ndarray
    u_upper: np.ndarray
    modes: tuple = ()
    u_scale: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    def eval_f(self, u, i: int) -> float:
        return float(self.batch(np.asarray(u, float)).f[i])

    def eval_g(self, u, i: int) -> np.ndarray:
        return self.batch(np.asarray(u, float)).g[i]

    def eval_grad_f(self, u, i: int) -> np.ndarray:
        return self.batch(np.asarray(u, float)).df[i]

    def eval_jac_g(self, u, i: int) -> np.ndarray:
        return self.batch(np.asarray(u, float)).dg[i]

    def mode_nlp(self, i: int = 0, cost_scale: float = 1.0) -> NlpProblem:
        """The program of a single mode as an NLP in ``u / u_scale``."""
        scale = self.u_scale if self.u_scale is not None else np.ones(self.n_u)

        def evaluate(x):
            b = self.batch(x * scale)
            return cost_scale * b.f[i], cost_scale * b.df[i] * scale, b.g[i], b.dg[i] * scale

        return NlpProblem(
            dim=self.n_u,
            cost=lambda x: evaluate(x)[0],
            grad=lambda x: evaluate(x)[1],
            ineq=lambda x: evaluate(x)[2],
            ineq_jac=lambda x: evaluate(x)[3],
            lower=self.u_lower / scale,
            upper=self.u_upper / scale,
            evaluate=evaluate,
        )

    @classmethod
    def from_functions(cls, fs, gs, grad_fs, jac_gs, u_lower, u_upper, **kw) -> CondensedProgram:
        """Assemble a program from per-mode callables."""
        lo = np.atleast_1d(np.asarray(u_lower, dtype=float))
        hi = np.atleast_1d(np.asarray(u_upper, dtype=float))
        n_u = lo.size
        m = int(np.atleast_1d(gs[0](np.zeros(n_u))).size)

        def batch(u):
            u = np.asarray(u, dtype=float)
            return ModeBatch(
                np.array([float(f(u)) for f in fs]),
                np.array([np.atleast_1d(df(u)) for df in grad_fs], dtype=float).reshape(len(fs), n_u),
                np.array([np.atleast_1d(g(u)) for g in gs], dtype=float).reshape(len(fs), m),
                np.array([np.atleast_2d(dg(u)) for dg in jac_gs], dtype=float).reshape(len(fs), m, n_u),
            )

        return cls(n_u=n_u, n_v=len(fs), m=m, batch=batch, u_lower=lo, u_upper=hi, **kw)


# ---------------------------------------------------------------------------
# batched rollout with forward sensitivities


class _Rollout(NamedTuple):
    s: np.ndarray  # (M, N+1)
    v: np.ndarray
    soc: np.ndarray
    ds: np.ndarray  # (M, N+1, n_u)
    dv: np.ndarray
    dsoc: np.ndarray
    t_max: np.ndarray  # (M, N) at w_m,k
    dt_max: np.ndarray  # (M, N, n_u)
    t_w: np.ndarray  # (M, N)


def _rollout_batch(u, ratios, state: PowertrainState, pt: Powertrain, strict: bool,
                   n_cols: int | None = None) -> _Rollout:
    """Roll every mode forward; ``ratios`` is (M, N) of overall ratios ``i_g * i_0``.

    Sensitivities get ``n_cols`` columns (default ``len(u)``); extra columns stay zero.
    """
    veh, motor, batt = pt.vehicle, pt.motor, pt.battery
    dt = veh.dt
    M, N = ratios.shape
    n_u = u.size if n_cols is None else n_cols
    s = np.empty((M, N + 1))
    v = np.empty((M, N + 1))
    soc = np.empty((M, N + 1))
    ds = np.zeros((M, N + 1, n_u))
    dv = np.zeros((M, N + 1, n_u))
    dsoc = np.zeros((M, N + 1, n_u))
    t_max = np.empty((M, N))
    dt_max = np.zeros((M, N, n_u))
    t_w = np.empty((M, N))
    s[:, 0], v[:, 0], soc[:, 0] = state.s, state.v, state.soc
    inv_rm = 1.0 / (veh.r_w * veh.m_eff)
    for k in range(N):
        R = ratios[:, k]
        tm = u[k]
        vk = v[:, k]
        w = vk / veh.r_w * R
        if strict and np.any(w > motor.w_max):
            raise MotorOverspeed(f"motor speed {np.max(w):.1f} rad/s above {motor.w_max}")
        tw = tm * R
        a = tw * inv_rm - veh.drag_coeff * vk * vk - veh.grade_accel
        dw = dv[:, k] * (R / veh.r_w)[:, None]
        _, tmx, slope = torque_limits_partials(w, motor, strict=False)
        t_max[:, k] = tmx
        dt_max[:, k] = slope[:, None] * dw

        pb, pb_t, pb_w = battery_power_partials(tm, w, motor, batt)
        dpb = pb_w[:, None] * dw
        dpb[:, k] += pb_t
        rate, r_p, r_soc = soc_rate_partials(pb, soc[:, k], batt, strict=strict)
        drate = r_p[:, None] * dpb + r_soc[:, None] * dsoc[:, k]

        da = -2.0 * veh.drag_coeff * vk[:, None] * dv[:, k]
        da[:, k] += R * inv_rm
        v_raw = vk + a * dt
        moving = (v_raw > 0)[:, None]

        s[:, k + 1] = s[:, k] + vk * dt
        v[:, k + 1] = np.maximum(v_raw, 0.0)
        soc[:, k + 1] = soc[:, k] + rate * dt
        t_w[:, k] = tw
        ds[:, k + 1] = ds[:, k] + dv[:, k] * dt
        dv[:, k + 1] = np.where(moving, dv[:, k] + da * dt, 0.0)
        dsoc[:, k + 1] = dsoc[:, k] + drate * dt
    return _Rollout(s, v, soc, ds, dv, dsoc, t_max, dt_max, t_w)


@dataclass(frozen=True)
class _Weights:
    soc: float
    w1: float
    w2: float


def _evaluate(
    u,
    ratios,
    mem: MpcMemory,
    preview: ReferencePreview,
    cfg: HorizonConfig,
    pt: Powertrain,
    weights: _Weights,
    slack: bool,
    strict: bool,
) -> ModeBatch:
    u = np.asarray(u, dtype=float)
    N = cfg.N
    n_u = u.size
    torque = u[:N]
    sigma = u[N] if slack else 0.0
    ro = _rollout_batch(torque, ratios, mem.current_state, pt, strict, n_cols=n_u)
    M = ratios.shape[0]
    dv, ds, dsoc, dt_max = ro.dv, ro.ds, ro.dsoc, ro.dt_max

    v_ref = np.asarray(preview.v_ref, dtype=float)
    s_ref = np.asarray(preview.s_ref, dtype=float)
    band = cfg.band(v_ref[1:])

    v1 = ro.v[:, 1:]
    s1 = ro.s[:, 1:]
    dv1 = dv[:, 1:]
    ds1 = ds[:, 1:]

    # cost
    err = v1 - v_ref[1:]
    tw_prev = np.concatenate([np.full((M, 1), mem.prev_wheel_torque), ro.t_w[:, :-1]], axis=1)
    dtw = ro.t_w - tw_prev
    f = -weights.soc * ro.soc[:, N] + weights.w1 * np.sum(err * err, axis=1) + weights.w2 * np.sum(dtw * dtw, axis=1)
    df = -weights.soc * dsoc[:, N] + 2.0 * weights.w1 * np.einsum("mk,mkj->mj", err, dv1)
    # d t_w,k / d u_k = R_k, and t_w,k-1 depends on u_{k-1}
    R = ratios
    coef = 2.0 * weights.w2 * dtw
    for k in range(N):
        df[:, k] += coef[:, k] * R[:, k]
        if k > 0:
            df[:, k - 1] -= coef[:, k] * R[:, k - 1]
    if slack:
        f = f + cfg.slack_penalty * sigma
        df[:, N] += cfg.slack_penalty

    # constraints, 6 rows per step
    gap = s_ref[1:] - s1
    dgap = -ds1
    g = np.empty((M, N, ROWS_PER_STEP))
    dg = np.zeros((M, N, ROWS_PER_STEP, n_u))
    g[:, :, 0] = cfg.tau_min * (v1 + cfg.delta1) - gap
    dg[:, :, 0] = cfg.tau_min * dv1 - dgap
    g[:, :, 1] = gap - cfg.tau_max * (v1 + cfg.delta1)
    dg[:, :, 1] = dgap - cfg.tau_max * dv1
    g[:, :, 2] = v1 - v_ref[1:] - band - sigma
    dg[:, :, 2] = dv1
    g[:, :, 3] = v_ref[1:] - v1 - band - sigma
    dg[:, :, 3] = -dv1
    if slack:
        dg[:, :, 2, N] = -1.0
        dg[:, :, 3, N] = -1.0
    g[:, :, 4] = -ro.t_max - torque
    dg[:, :, 4] = -dt_max
    g[:, :, 5] = torque - ro.t_max
    dg[:, :, 5] = -dt_max
    idx = np.arange(N)
    dg[:, idx, 4, idx] -= 1.0
    dg[:, idx, 5, idx] += 1.0
    return ModeBatch(f, df, g.reshape(M, N * ROWS_PER_STEP), dg.reshape(M, N * ROWS_PER_STEP, n_u))


def tracking_guess(mem: MpcMemory, preview: ReferencePreview, ratios, pt: Powertrain) -> np.ndarray:
    """Motor torques that follow the preview speeds, clipped to the envelope.

    Used as an SQP start point when no usable previous plan exists; unlike a
    zero start it is not stuck at the standstill clamp.
    """
    veh = pt.vehicle
    v = mem.current_state.v
    u = np.empty(len(ratios))
    for k, R in enumerate(ratios):
        t_w = float(inverse_wheel_torque(v, preview.v_ref[k + 1], veh))
        w = v / veh.r_w * R
        lo, hi = torque_limits(w, pt.motor, strict=False)
        u[k] = float(np.clip(t_w / R, lo, hi))
        a = (u[k] * R) / (veh.r_w * veh.m_eff) - veh.drag_coeff * v * v - veh.grade_accel
        v = max(0.0, v + a * veh.dt)
    return u


def _ratios(seqs: Sequence[GearSequence], table: GearTable, i_0: float, N: int) -> np.ndarray:
    return np.array([[table.ratio(g) * i_0 for g in s.positions[:N]] for s in seqs], dtype=float)


# ---------------------------------------------------------------------------
# single-sequence operations


def rollout(u, seq: GearSequence, mem: MpcMemory, preview: ReferencePreview, pt: Powertrain,
            table: GearTable, strict: bool = True) -> list[PowertrainState]:
    """States ``xi_0 .. xi_N`` produced by torque trajectory ``u`` under ``seq``."""
    u = np.asarray(u, dtype=float)
    N = u.size
    ro = _rollout_batch(u, _ratios([seq], table, pt.vehicle.i_0, N), mem.current_state, pt, strict)
    return [PowertrainState(float(ro.s[0, k]), float(ro.v[0, k]), float(ro.soc[0, k])) for k in range(N + 1)]


def _single(u, seq, mem, preview, config, pt, table) -> ModeBatch:
    u = np.asarray(u, dtype=float)
    ratios = _ratios([seq], table, pt.vehicle.i_0, config.N)
    w = _Weights(1.0, config.w1, config.w2)
    return _evaluate(u, ratios, mem, preview, config, pt, w, slack=False, strict=True)


def cost(u, seq, mem, preview, config: HorizonConfig, pt: Powertrain, table: GearTable) -> float:
    return float(_single(u, seq, mem, preview, config, pt, table).f[0])


def constraints(u, seq, mem, preview, config: HorizonConfig, pt: Powertrain, table: GearTable) -> np.ndarray:
    """Stacked constraint rows, feasible where ``<= 0``; ``6N`` entries."""
    return _single(u, seq, mem, preview, config, pt, table).g[0]


def gradient(u, seq, mem, preview, config: HorizonConfig, pt: Powertrain, table: GearTable) -> np.ndarray:
    return _single(u, seq, mem, preview, config, pt, table).df[0]


def jacobian(u, seq, mem, preview, config: HorizonConfig, pt: Powertrain, table: GearTable) -> np.ndarray:
    return _single(u, seq, mem, preview, config, pt, table).dg[0]


# ---------------------------------------------------------------------------
# condensed program


def build_condensed(
    mem: MpcMemory,
    preview: ReferencePreview,
    config: HorizonConfig,
    pt: Powertrain,
    table: GearTable,
    cache: SequenceCache | None = None,
    *,
    sequences: Sequence[GearSequence] | None = None,
    slack: bool = False,
    soc_weight: float = 1.0,
    w1: float | None = None,
    w2: float | None = None,
    strict: bool = False,
) -> CondensedProgram:
    """Mode-indexed program over the admissible sequences from the current gear.

    ``sequences`` overrides the admissible set (used for fixed-ratio
    strategies); ``strict=False`` lets optimizer iterates wander outside the
    motor/battery domain without raising.
    """
    if preview.N != config.N:
        raise ValueError("preview length does not match horizon")
    if sequences is None:
        if cache is None:
            cache = SequenceCache(config.N, config.zeta_max, table)
        sequences = cache[mem.current_gear]
    seqs = tuple(sequences)
    ratios = _ratios(seqs, table, pt.vehicle.i_0, config.N)
    return _program(ratios, seqs, mem, preview, config, pt, slack, soc_weight, w1, w2, strict)


def build_fixed_ratio(
    mem: MpcMemory,
    preview: ReferencePreview,
    config: HorizonConfig,
    pt: Powertrain,
    overall_ratio: float,
    *,
    soc_weight: float = 0.0,
    w1: float | None = None,
    w2: float | None = None,
    slack: bool = False,
) -> CondensedProgram:
    """Single-mode program with a constant overall ratio ``T_w = T_m * ratio``."""
    ratios = np.full((1, config.N), float(overall_ratio))
    return _program(ratios, (), mem, preview, config, pt, slack, soc_weight, w1, w2, False)


def _program(ratios, seqs, mem, preview, config, pt, slack, soc_weight, w1, w2, strict):
    weights = _Weights(
        float(soc_weight),
        config.w1 if w1 is None else float(w1),
        config.w2 if w2 is None else float(w2),
    )
    N = config.N
    n_u = N + 1 if slack else N
    t_peak = pt.motor.T_peak
    lo = np.full(n_u, -t_peak)
    hi = np.full(n_u, t_peak)
    scale = np.full(n_u, t_peak)
    if slack:
        lo[N], hi[N], scale[N] = 0.0, config.slack_max, 1.0

    def batch(u):
        return _evaluate(u, ratios, mem, preview, config, pt, weights, slack, strict)

    return CondensedProgram(
        n_u=n_u,
        n_v=ratios.shape[0],
        m=N * ROWS_PER_STEP,
        batch=batch,
        u_lower=lo,
        u_upper=hi,
        modes=seqs,
        u_scale=scale,
        info={"slack": slack, "ratios": ratios},
    )
