import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevshift.errors import BatteryLimitExceeded, MotorOverspeed
from bevshift.powertrain import (
    AffineMap,
    BatteryParams,
    ConstantEfficiency,
    MotorParams,
    Powertrain,
    PowertrainInput,
    PowertrainState,
    accel,
    battery_power,
    battery_power_partials,
    motor_speed,
    soc_rate,
    soc_rate_partials,
    step,
    torque_limits,
    torque_limits_partials,
    transition,
    wheel_torque,
)


def const_motor(eta, divides=True, **kw):
    base = dict(T_peak=200.0, P_peak=60000.0, w_max=1200.0)
    base.update(kw)
    return MotorParams(ConstantEfficiency(eta), regen_divides_efficiency=divides, **base)


def batt(eta_plus=0.9, eta_minus=1.11):
    return BatteryParams(55.0, eta_plus, eta_minus, AffineMap(340.0, 40.0), AffineMap(0.12, -0.03))


class TestWheelAndMotor:
    def test_wheel_torque_examples(self, pt):
        veh = pt.vehicle
        assert wheel_torque(50.0, 3.05, veh) == pytest.approx(640.5)
        assert wheel_torque(0.0, 1.72, veh) == 0.0
        assert wheel_torque(-30.0, 0.92, veh) == pytest.approx(-115.92)

    def test_motor_speed_examples(self, pt):
        veh = pt.vehicle
        assert motor_speed(10.0, 3.05, veh) == pytest.approx(404.61, abs=0.01)
        assert motor_speed(0.0, 3.05, veh) == 0.0
        assert motor_speed(10.0, 0.92, veh) == pytest.approx(122.05, abs=0.01)


class TestAccel:
    def test_coasting_at_20(self, pt):
        # drag 0.10675 + rolling 0.08437
        assert accel(20.0, 0.0, pt.vehicle) == pytest.approx(-0.1911, abs=1e-4)

    def test_no_forces(self, pt):
        veh = dataclasses.replace(pt.vehicle, mu=0.0, theta=0.0)
        assert accel(0.0, 0.0, veh) == 0.0

    def test_launch(self, pt):
        assert accel(0.0, 640.5, pt.vehicle) == pytest.approx(640.5 / (0.3166 * 1445) - 9.81 * 0.0086, abs=1e-4)
        assert accel(0.0, 640.5, pt.vehicle) == pytest.approx(1.3157, abs=1e-4)

    def test_grade_uses_sine_and_cosine(self, pt):
        theta = 0.05
        veh = dataclasses.replace(pt.vehicle, theta=theta)
        expected = -veh.g * (math.sin(theta) + veh.mu * math.cos(theta))
        assert accel(0.0, 0.0, veh) == pytest.approx(expected)


class TestBatteryPower:
    def test_zero_torque(self, pt):
        assert battery_power(0.0, 300.0, pt.motor, pt.battery) == 0.0

    def test_drive_branch(self):
        assert battery_power(100.0, 200.0, const_motor(0.9), batt()) == pytest.approx(24691.358, abs=0.01)

    def test_regen_literal_branch(self):
        assert battery_power(-100.0, 200.0, const_motor(0.9), batt()) == pytest.approx(-20020.02, abs=0.01)

    def test_regen_default_multiplies(self):
        p = battery_power(-100.0, 200.0, const_motor(0.9, divides=False), batt())
        assert p == pytest.approx(-20000.0 * 0.9 / 1.11)

    def test_literal_regen_returns_more_than_mechanical_power(self):
        # with eta_m * eta_b- < 1 the literal form recovers more than the shaft delivers
        p = battery_power(-100.0, 200.0, const_motor(0.6), batt())
        assert abs(p) > 20000.0
        p_mul = battery_power(-100.0, 200.0, const_motor(0.6, divides=False), batt())
        assert abs(p_mul) < 20000.0

    @settings(max_examples=60, deadline=None)
    @given(t=st.floats(0.1, 200.0), w=st.floats(1.0, 1000.0), e1=st.floats(0.5, 0.95), e2=st.floats(0.5, 0.95))
    def test_drive_monotone_in_efficiencies(self, t, w, e1, e2):
        lo, hi = sorted((e1, e2))
        assert battery_power(t, w, const_motor(hi), batt()) <= battery_power(t, w, const_motor(lo), batt())
        assert battery_power(t, w, const_motor(0.9), batt(eta_plus=hi)) <= battery_power(
            t, w, const_motor(0.9), batt(eta_plus=lo))

    @settings(max_examples=60, deadline=None)
    @given(t=st.floats(-200.0, -0.1), w=st.floats(1.0, 1000.0), m1=st.floats(1.01, 1.5), m2=st.floats(1.01, 1.5))
    def test_regen_increasing_in_recharge_efficiency(self, t, w, m1, m2):
        lo, hi = sorted((m1, m2))
        # larger eta_b- means less recharge, i.e. a less negative power
        assert battery_power(t, w, const_motor(0.9), batt(eta_minus=hi)) >= battery_power(
            t, w, const_motor(0.9), batt(eta_minus=lo))

    def test_partials_match_central_differences(self, pt, rng):
        for _ in range(100):
            t = rng.uniform(-150, 150)
            w = rng.uniform(20, 900)
            p, dp_dt, dp_dw = battery_power_partials(t, w, pt.motor, pt.battery)
            h_t, h_w = 1e-5 * max(1.0, abs(t)), 1e-5 * w
            fd_t = (battery_power(t + h_t, w, pt.motor, pt.battery) - battery_power(t - h_t, w, pt.motor, pt.battery)) / (2 * h_t)
            fd_w = (battery_power(t, w + h_w, pt.motor, pt.battery) - battery_power(t, w - h_w, pt.motor, pt.battery)) / (2 * h_w)
            if abs(t) > 2 * h_t:
                assert dp_dt == pytest.approx(fd_t, rel=1e-5, abs=1e-6)
            assert dp_dw == pytest.approx(fd_w, rel=1e-5, abs=1e-6)


class TestSocRate:
    def test_zero_power(self, pt):
        assert soc_rate(0.0, 0.8, pt.battery) == 0.0

    def test_zero_discriminant(self, pt):
        b = pt.battery
        voc, rb = b.v_oc_map(0.8), b.r_b_map(0.8)
        p_max = voc * voc / (4 * rb)
        assert soc_rate(p_max, 0.8, b) == pytest.approx(-voc / (2 * b.capacity_as * rb))

    def test_above_capability_raises(self, pt):
        b = pt.battery
        p_max = b.v_oc_map(0.8) ** 2 / (4 * b.r_b_map(0.8))
        with pytest.raises(BatteryLimitExceeded):
            soc_rate(p_max * (1 + 1e-6), 0.8, b)

    def test_capacity_in_ampere_seconds(self, pt):
        b = pt.battery
        p = 1000.0
        voc, rb = b.v_oc_map(0.5), b.r_b_map(0.5)
        expected = -(voc - math.sqrt(voc * voc - 4 * rb * p)) / (2 * 3600 * b.C * rb)
        assert soc_rate(p, 0.5, b) == pytest.approx(expected, rel=1e-12)

    @settings(max_examples=80, deadline=None)
    @given(p1=st.floats(-8e4, 8e4), p2=st.floats(-8e4, 8e4), soc=st.floats(0.05, 0.95))
    def test_strictly_decreasing_in_power(self, pt, p1, p2, soc):
        if abs(p1 - p2) < 1e-3:
            return
        lo, hi = sorted((p1, p2))
        assert soc_rate(hi, soc, pt.battery) < soc_rate(lo, soc, pt.battery)

    def test_partials(self, pt, rng):
        b = pt.battery
        for _ in range(50):
            p, soc = rng.uniform(-5e4, 5e4), rng.uniform(0.1, 0.9)
            _, d_p, d_soc = soc_rate_partials(p, soc, b)
            hp, hs = 1e-3, 1e-6
            fd_p = (soc_rate(p + hp, soc, b) - soc_rate(p - hp, soc, b)) / (2 * hp)
            fd_s = (soc_rate(p, soc + hs, b) - soc_rate(p, soc - hs, b)) / (2 * hs)
            assert d_p == pytest.approx(fd_p, rel=1e-5)
            assert d_soc == pytest.approx(fd_s, rel=1e-4, abs=1e-14)


class TestTorqueLimits:
    def test_standstill(self, pt):
        m = pt.motor
        assert torque_limits(0.0, m) == (-m.T_peak, m.T_peak)

    def test_constant_power_region(self, pt):
        m = pt.motor
        lo, hi = torque_limits(2 * m.P_peak / m.T_peak, m)
        assert (lo, hi) == (pytest.approx(-m.T_peak / 2), pytest.approx(m.T_peak / 2))

    def test_overspeed(self, pt):
        with pytest.raises(MotorOverspeed):
            torque_limits(pt.motor.w_max + 1, pt.motor)

    def test_slope_matches_difference(self, pt):
        m = pt.motor
        for w in (100.0, 400.0, 800.0):
            _, _, slope = torque_limits_partials(w, m)
            fd = (torque_limits(w + 1e-4, m)[1] - torque_limits(w - 1e-4, m)[1]) / 2e-4
            assert slope == pytest.approx(fd, rel=1e-6, abs=1e-9)


class TestStep:
    def test_equilibrium(self, pt):
        veh = dataclasses.replace(pt.vehicle, mu=0.0, theta=0.0)
        p = Powertrain(veh, pt.battery, pt.motor)
        assert step(PowertrainState(0, 0, 0.8), PowertrainInput(0.0, 3.05), p) == PowertrainState(0, 0, 0.8)

    def test_coasting_step(self, pt):
        nxt = step(PowertrainState(0.0, 10.0, 0.8), PowertrainInput(0.0, 3.05), pt)
        assert nxt.s == 10.0
        assert nxt.v == pytest.approx(10.0 + accel(10.0, 0.0, pt.vehicle))
        assert nxt.soc == 0.8

    def test_golden_step_against_independent_evaluation(self, pt):
        # independent evaluation of the model equations, written without the library
        m, r_w, rho, A, Cd, g, mu, i0 = 1445.0, 0.3166, 1.2, 2.06, 0.312, 9.81, 0.0086, 4.2
        t_m, v, i_g = 50.0, 10.0, 3.05
        w = v / r_w * i_g * i0
        t_w = t_m * i_g * i0
        a = t_w / (r_w * m) - rho * A * Cd / (2 * m) * v * v - g * mu
        k0, k1, k2 = 500.0, 0.003, 0.3
        eta = (t_m * w) / (t_m * w + k0 + k1 * w * w + k2 * t_m * t_m)
        p_b = t_m * w / (0.9 * eta)
        voc, rb = 340.0 + 40.0 * 0.8, 0.12 - 0.03 * 0.8
        rate = -(voc - math.sqrt(voc * voc - 4 * rb * p_b)) / (2 * 3600 * 55.0 * rb)
        assert 0.6 < eta < 0.94  # inside the clip, so the raw loss model applies
        nxt = step(PowertrainState(0.0, v, 0.8), PowertrainInput(t_m, i_g), pt)
        assert nxt.v == pytest.approx(v + a, rel=1e-12)
        assert nxt.v == pytest.approx(11.2890, abs=1e-4)
        assert nxt.soc == pytest.approx(0.8 + rate, rel=1e-12)

    def test_standstill_does_not_reverse(self, pt):
        nxt = step(PowertrainState(0.0, 0.5, 0.8), PowertrainInput(-150.0, 3.05), pt)
        assert nxt.v == 0.0

    def test_half_steps_agree_to_first_order(self, pt, rng):
        ratios = []
        for _ in range(20):
            v0, t_m = rng.uniform(5, 25), rng.uniform(-60, 120)
            diffs = []
            for dt in (0.2, 0.1):
                veh = dataclasses.replace(pt.vehicle, dt=dt)
                p = Powertrain(veh, pt.battery, pt.motor)
                s = PowertrainState(0.0, v0, 0.8)
                one = step(s, PowertrainInput(t_m, 1.72), p)
                veh2 = dataclasses.replace(pt.vehicle, dt=dt / 2)
                p2 = Powertrain(veh2, pt.battery, pt.motor)
                two = step(step(s, PowertrainInput(t_m, 1.72), p2), PowertrainInput(t_m, 1.72), p2)
                diffs.append(abs(one.v - two.v))
            ratios.append(diffs[0] / diffs[1])
        # O(dt^2) local difference: halving dt quarters it
        assert np.median(ratios) == pytest.approx(4.0, rel=0.05)

    def test_transition_partials_in_torque(self, pt, rng):
        for _ in range(100):
            v, t_m, ratio = rng.uniform(1, 25), rng.uniform(-100, 150), rng.choice([3.05, 1.72, 0.92]) * 4.2
            h = 1e-5 * max(1.0, abs(t_m))
            plus = transition(0.0, v, 0.8, t_m + h, ratio, pt)
            minus = transition(0.0, v, 0.8, t_m - h, ratio, pt)
            dv_fd = (plus.v_raw - minus.v_raw) / (2 * h)
            assert dv_fd == pytest.approx(ratio / (pt.vehicle.r_w * pt.vehicle.m_eff) * pt.vehicle.dt, rel=1e-5)
