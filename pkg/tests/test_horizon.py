import dataclasses
import math

import numpy as np
import pytest

from oracles import central_fd

from bevshift.horizon import (
    HorizonConfig,
    MpcMemory,
    ReferencePreview,
    build_condensed,
    build_fixed_ratio,
    constraints,
    cost,
    gradient,
    jacobian,
    rollout,
)
from bevshift.powertrain import Powertrain, PowertrainInput, PowertrainState, step, torque_limits
from bevshift.transmission import GearSequence, SequenceCache


def instance(rng, N=8, gear=2, v0=None):
    v0 = rng.uniform(6, 18) if v0 is None else v0
    v_ref = np.clip(v0 + np.cumsum(rng.normal(0, 0.6, N + 1)), 0.5, None)
    v_ref[0] = v0
    gap = 1.5 * (v0 + 5.0)
    preview = ReferencePreview.from_speeds(v_ref, gap, 1.0)
    mem = MpcMemory(rng.uniform(-300, 300), PowertrainState(0.0, v0, 0.8), gear)
    return mem, preview


def scripted_rollout(u, seq, mem, pt, table):
    states = [mem.current_state]
    for k, t in enumerate(u):
        states.append(step(states[-1], PowertrainInput(float(t), table.ratio(seq.positions[k])), pt))
    return states


def scripted_cost(u, seq, mem, preview, cfg, pt, table):
    states = scripted_rollout(u, seq, mem, pt, table)
    J = -states[-1].soc
    tw_prev = mem.prev_wheel_torque
    for k, t in enumerate(u):
        tw = t * table.ratio(seq.positions[k]) * pt.vehicle.i_0
        J += cfg.w1 * (states[k + 1].v - preview.v_ref[k + 1]) ** 2 + cfg.w2 * (tw - tw_prev) ** 2
        tw_prev = tw
    return J


def scripted_constraints(u, seq, mem, preview, cfg, pt, table):
    states = scripted_rollout(u, seq, mem, pt, table)
    rows = []
    for k, t in enumerate(u):
        nxt = states[k + 1]
        gap = preview.s_ref[k + 1] - nxt.s
        b = max(cfg.epsilon * preview.v_ref[k + 1], cfg.delta2)
        w = states[k].v / pt.vehicle.r_w * table.ratio(seq.positions[k]) * pt.vehicle.i_0
        lo, hi = torque_limits(w, pt.motor)
        rows += [
            cfg.tau_min * (nxt.v + cfg.delta1) - gap,
            gap - cfg.tau_max * (nxt.v + cfg.delta1),
            nxt.v - preview.v_ref[k + 1] - b,
            preview.v_ref[k + 1] - nxt.v - b,
            lo - t,
            t - hi,
        ]
    return np.array(rows)


def random_seq(rng, cache, gear):
    seqs = cache[gear]
    return seqs[rng.integers(len(seqs))]


class TestPreview:
    def test_recursion_exact(self, rng):
        v = rng.uniform(0, 30, 9)
        p = ReferencePreview.from_speeds(v, 12.5, 1.0)
        assert p.is_consistent(1.0)
        acc = [12.5]
        for x in v[:-1]:
            acc.append(acc[-1] + x)
        assert p.s_ref == tuple(acc)


class TestRollout:
    def test_zero_torque_at_rest(self, pt, table, hcfg):
        veh = dataclasses.replace(pt.vehicle, mu=0.0)
        p = Powertrain(veh, pt.battery, pt.motor)
        mem = MpcMemory(0.0, PowertrainState(0.0, 0.0, 0.8), 2)
        states = rollout(np.zeros(5), GearSequence((2,) * 6), mem, None, p, table)
        assert all(s == PowertrainState(0.0, 0.0, 0.8) for s in states)

    def test_matches_chained_steps(self, pt, table, rng):
        cache = SequenceCache(8, 1, table)
        for _ in range(10):
            mem, preview = instance(rng)
            seq = random_seq(rng, cache, 2)
            u = rng.uniform(-80, 120, 8)
            got = rollout(u, seq, mem, preview, pt, table)
            want = scripted_rollout(u, seq, mem, pt, table)
            for a, b in zip(got, want):
                assert (a.s, a.v, a.soc) == pytest.approx((b.s, b.v, b.soc), rel=1e-13, abs=1e-13)


class TestCostAndConstraints:
    def test_zero_weights_leave_soc(self, pt, table, hcfg, rng):
        cfg = dataclasses.replace(hcfg, w1=0.0, w2=0.0)
        mem, preview = instance(rng)
        seq = GearSequence((2,) * 9)
        u = rng.uniform(0, 100, 8)
        assert cost(u, seq, mem, preview, cfg, pt, table) == pytest.approx(-rollout(u, seq, mem, preview, pt, table)[-1].soc)

    def test_exact_tracking_gives_soc_only(self, pt, table, hcfg):
        # constant speed held by constant drag-balancing torque equal to the previous one
        v0 = 12.0
        veh = pt.vehicle
        R = table.ratio(2) * veh.i_0
        t_w = veh.r_w * veh.m_eff * (veh.drag_coeff * v0 * v0 + veh.grade_accel)
        preview = ReferencePreview.from_speeds([v0] * 9, 25.0, 1.0)
        mem = MpcMemory(t_w, PowertrainState(0.0, v0, 0.8), 2)
        seq = GearSequence((2,) * 9)
        u = np.full(8, t_w / R)
        soc_n = rollout(u, seq, mem, preview, pt, table)[-1].soc
        assert cost(u, seq, mem, preview, hcfg, pt, table) == pytest.approx(-soc_n, abs=1e-12)

    def test_cost_matches_scripted(self, pt, table, hcfg, rng):
        cache = SequenceCache(8, 1, table)
        for _ in range(20):
            mem, preview = instance(rng)
            seq = random_seq(rng, cache, 2)
            u = rng.uniform(-60, 120, 8)
            assert cost(u, seq, mem, preview, hcfg, pt, table) == pytest.approx(
                scripted_cost(u, seq, mem, preview, hcfg, pt, table), rel=1e-12)

    def test_constraints_match_scripted(self, pt, table, hcfg, rng):
        cache = SequenceCache(8, 1, table)
        for _ in range(20):
            mem, preview = instance(rng)
            seq = random_seq(rng, cache, 2)
            u = rng.uniform(-60, 120, 8)
            got = constraints(u, seq, mem, preview, hcfg, pt, table)
            assert got.shape == (48,)
            np.testing.assert_allclose(got, scripted_constraints(u, seq, mem, preview, hcfg, pt, table), rtol=1e-12, atol=1e-9)

    def test_interior_point(self, pt, table, hcfg):
        v0 = 12.0
        preview = ReferencePreview.from_speeds([v0] * 9, 1.5 * (v0 + 5.0), 1.0)
        mem = MpcMemory(0.0, PowertrainState(0.0, v0, 0.8), 2)
        g = constraints(np.zeros(8), GearSequence((2,) * 9), mem, preview, hcfg, pt, table)
        assert np.all(g < 0)

    def test_active_band_row(self, pt, table, hcfg):
        v0 = 10.0
        veh = pt.vehicle
        R = table.ratio(2) * veh.i_0
        b = hcfg.band(v0)
        # pick u_0 so v_1 lands exactly on the upper band edge
        t_w = veh.r_w * veh.m_eff * (b + veh.drag_coeff * v0 * v0 + veh.grade_accel)
        preview = ReferencePreview.from_speeds([v0] * 9, 1.5 * (v0 + 5.0), 1.0)
        mem = MpcMemory(0.0, PowertrainState(0.0, v0, 0.8), 2)
        u = np.zeros(8)
        u[0] = t_w / R
        g = constraints(u, GearSequence((2,) * 9), mem, preview, hcfg, pt, table)
        assert g[2] == pytest.approx(0.0, abs=1e-12)


class TestDerivatives:
    def test_gradient_and_jacobian(self, pt, table, hcfg, rng):
        cache = SequenceCache(8, 1, table)
        for _ in range(30):
            mem, preview = instance(rng)
            seq = random_seq(rng, cache, 2)
            u = rng.uniform(-40, 100, 8)
            args = (seq, mem, preview, hcfg, pt, table)
            g = gradient(u, *args)
            fd = central_fd(lambda x: np.array(cost(x, *args)), u)
            np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-9)
            J = jacobian(u, *args)
            fdJ = central_fd(lambda x: constraints(x, *args), u)
            np.testing.assert_allclose(J, fdJ, rtol=1e-5, atol=1e-6)

    def test_torque_rows_have_unit_diagonal(self, pt, table, hcfg, rng):
        mem, preview = instance(rng)
        J = jacobian(rng.uniform(0, 50, 8), GearSequence((2,) * 9), mem, preview, hcfg, pt, table)
        rows = J.reshape(8, 6, 8)
        for k in range(8):
            # diagonal -1/+1 plus the envelope-speed coupling through earlier torques
            assert rows[k, 4, k] == pytest.approx(-1.0)
            assert rows[k, 5, k] == pytest.approx(1.0)

    def test_causality(self, pt, table, hcfg, rng):
        mem, preview = instance(rng)
        J = jacobian(rng.uniform(0, 50, 8), GearSequence((2,) * 9), mem, preview, hcfg, pt, table)
        rows = J.reshape(8, 6, 8)
        for k in range(8):
            assert np.all(rows[k, :4, k + 1:] == 0.0)


class TestCondensed:
    @pytest.mark.parametrize("gear, N, zeta, n_v", [(2, 8, 1, 17), (1, 8, 1, 9), (2, 5, 0, 1)])
    def test_dimensions(self, pt, table, hcfg, rng, gear, N, zeta, n_v):
        cfg = dataclasses.replace(hcfg, N=N, zeta_max=zeta)
        mem, preview = instance(rng, N=N, gear=gear)
        prog = build_condensed(mem, preview, cfg, pt, table)
        assert (prog.n_u, prog.n_v, prog.m) == (N, n_v, 6 * N)
        b = prog.batch(np.zeros(N))
        assert b.f.shape == (n_v,) and b.g.shape == (n_v, 6 * N) and b.dg.shape == (n_v, 6 * N, N)

    def test_modes_follow_canonical_order(self, pt, table, hcfg, rng):
        mem, preview = instance(rng)
        prog = build_condensed(mem, preview, hcfg, pt, table)
        assert prog.modes == SequenceCache(8, 1, table)[2]
        u = rng.uniform(-20, 80, 8)
        for i in (0, 5, 16):
            assert prog.eval_f(u, i) == pytest.approx(cost(u, prog.modes[i], mem, preview, hcfg, pt, table), rel=1e-12)

    def test_constant_gear_mode_equals_fixed_ratio_program(self, pt, table, hcfg, rng):
        mem, preview = instance(rng)
        prog = build_condensed(mem, preview, hcfg, pt, table)
        fixed = build_fixed_ratio(mem, preview, hcfg, pt, table.ratio(2) * pt.vehicle.i_0, soc_weight=1.0)
        for _ in range(5):
            u = rng.uniform(-50, 100, 8)
            a, b = prog.batch(u), fixed.batch(u)
            assert a.f[0] == pytest.approx(b.f[0], rel=1e-14)
            np.testing.assert_allclose(a.g[0], b.g[0], rtol=1e-14)

    def test_slack_relaxes_band_rows_only(self, pt, table, hcfg, rng):
        mem, preview = instance(rng)
        prog = build_condensed(mem, preview, hcfg, pt, table, slack=True)
        u = np.append(rng.uniform(0, 50, 8), 0.0)
        u2 = u.copy()
        u2[-1] = 1.5
        g0, g1 = prog.batch(u).g[0].reshape(8, 6), prog.batch(u2).g[0].reshape(8, 6)
        np.testing.assert_allclose(g1[:, 2:4], g0[:, 2:4] - 1.5)
        np.testing.assert_allclose(g1[:, [0, 1, 4, 5]], g0[:, [0, 1, 4, 5]])
        assert prog.batch(u2).f[0] - prog.batch(u).f[0] == pytest.approx(1.5 * hcfg.slack_penalty)

    def test_preview_length_checked(self, pt, table, hcfg, rng):
        mem, preview = instance(rng, N=5)
        with pytest.raises(ValueError):
            build_condensed(mem, preview, hcfg, pt, table)


def test_config_validation():
    with pytest.raises(Exception):
        HorizonConfig(tau_min=2.0, tau_max=1.0)
    assert math.isclose(HorizonConfig().band(30.0), 3.0)
    assert math.isclose(HorizonConfig().band(5.0), 2.0)
