import numpy as np
import pytest

from oracles import brute_force_qp

from bevshift.errors import CallbackFailure, LineSearchFail, QpInfeasible
from bevshift.relaxation import two_mode_fixture
from bevshift.sqp import (
    NlpProblem,
    SqpSettings,
    SqpStatus,
    bfgs_update,
    kkt_residual,
    merit_line_search,
    qp_subproblem,
    solve,
)


def quadratic_nlp(H, g, A=None, b=None, A_eq=None, b_eq=None, lower=-np.inf, upper=np.inf):
    n = H.shape[0]
    A = np.zeros((0, n)) if A is None else A
    b = np.zeros(0) if b is None else b
    return NlpProblem(
        dim=n, cost=lambda x: 0.5 * x @ H @ x + g @ x, grad=lambda x: H @ x + g,
        ineq=lambda x: A @ x - b, ineq_jac=lambda x: A, lower=lower, upper=upper,
        A_eq=A_eq, b_eq=b_eq)


class TestQpSubproblem:
    def test_unconstrained_newton(self):
        r = qp_subproblem(np.eye(2), np.array([1.0, 0.0]))
        np.testing.assert_allclose(r.step, [-1.0, 0.0], atol=1e-12)

    def test_clipped_by_bound(self):
        r = qp_subproblem(np.eye(2), np.array([1.0, 0.0]), lower=np.array([-0.5, -np.inf]))
        np.testing.assert_allclose(r.step, [-0.5, 0.0], atol=1e-12)
        assert r.z_lower[0] == pytest.approx(0.5)

    def test_clipped_by_general_row(self):
        r = qp_subproblem(np.eye(2), np.array([1.0, 0.0]), A_in=np.array([[-1.0, 0.0]]), b_in=np.array([0.5]))
        np.testing.assert_allclose(r.step, [-0.5, 0.0], atol=1e-12)
        assert r.lam[0] == pytest.approx(0.5)

    def test_infeasible_raises(self):
        with pytest.raises(QpInfeasible):
            qp_subproblem(np.eye(1), np.zeros(1), A_in=np.array([[1.0], [-1.0]]), b_in=np.array([-1.0, -1.0]))

    def test_random_3d_against_enumeration(self, rng):
        for _ in range(60):
            M = rng.normal(size=(3, 3))
            H = M @ M.T + 0.1 * np.eye(3)
            g = rng.normal(size=3)
            A = rng.normal(size=(5, 3))
            b = rng.uniform(0.0, 1.0, 5)  # origin feasible
            r = qp_subproblem(H, g, A_in=A, b_in=b)
            np.testing.assert_allclose(r.step, brute_force_qp(H, g, A, b), atol=1e-8)
            assert np.all(r.lam >= -1e-12)


class TestBfgs:
    def test_secant(self, rng):
        M = rng.normal(size=(4, 4))
        Q = M @ M.T + np.eye(4)
        s = rng.normal(size=4)
        Hn = bfgs_update(np.eye(4), s, Q @ s)
        np.testing.assert_allclose(Hn @ s, Q @ s, rtol=1e-10)

    def test_fixed_point(self, rng):
        M = rng.normal(size=(3, 3))
        H = M @ M.T + np.eye(3)
        s = rng.normal(size=3)
        np.testing.assert_allclose(bfgs_update(H, s, H @ s), H, rtol=1e-12, atol=1e-12)

    def test_adversarial_curvature_keeps_pd(self, rng):
        for _ in range(50):
            M = rng.normal(size=(3, 3))
            H = M @ M.T + 0.5 * np.eye(3)
            s = rng.normal(size=3)
            y = -rng.uniform(0.1, 2.0) * s + 0.1 * rng.normal(size=3)
            Hn = bfgs_update(H, s, y)
            assert np.min(np.linalg.eigvalsh(Hn)) > 0
            np.testing.assert_allclose(Hn, Hn.T)


class TestLineSearch:
    def test_full_step_on_quadratic(self):
        # phi(a) = (1 - a)^2 along the Newton direction from x = 1
        assert merit_line_search(lambda a: (1 - a) ** 2, 1.0, -2.0) == 1.0

    def test_wall_forces_backtracking(self):
        # l1 merit with a steep wall at a = 0.3
        def merit(a):
            return (1 - a) ** 2 + 100.0 * max(0.0, a - 0.3)

        alphas = np.linspace(0, 1, 1001)
        a = merit_line_search(merit, merit(0.0), -2.0)
        assert a < 1.0 and merit(a) < merit(0.0)
        # the first trial in the 1/2^k sequence satisfying Armijo
        expected = next(0.5**k for k in range(40) if merit(0.5**k) <= 1.0 - 1e-4 * 2.0 * 0.5**k)
        assert a == expected
        assert min(merit(x) for x in alphas) <= merit(a)

    def test_non_descent_raises(self):
        with pytest.raises(LineSearchFail):
            merit_line_search(lambda a: a, 0.0, 1.0)

    def test_floor_raises(self):
        with pytest.raises(LineSearchFail):
            merit_line_search(lambda a: 1.0 + a, 1.0, -1.0, min_step=1e-3)


class TestSolve:
    def test_active_bound_multiplier(self):
        nlp = NlpProblem(1, lambda x: (x[0] - 1) ** 2, lambda x: np.array([2 * (x[0] - 1)]),
                         lambda x: np.array([x[0] - 0.5]), lambda x: np.array([[1.0]]), -10, 10)
        res = solve(nlp, [0.0])
        assert res.converged
        assert res.u_star[0] == pytest.approx(0.5, abs=1e-8)
        assert res.multipliers.ineq[0] == pytest.approx(1.0, abs=1e-6)

    def test_symmetric_equality(self):
        nlp = quadratic_nlp(2 * np.eye(2), np.zeros(2), A_eq=np.ones((1, 2)), b_eq=[1.0])
        res = solve(nlp, [3.0, -1.0])
        assert res.converged
        np.testing.assert_allclose(res.u_star, [0.5, 0.5], atol=1e-8)

    def test_two_mode_global_start(self):
        _, r = two_mode_fixture()
        res = solve(r.as_nlp(), [-0.5, 0.1, 0.9])
        assert res.converged
        assert abs(res.cost + 1.0) <= 1e-6
        np.testing.assert_allclose(res.u_star, [-1.0, 0.0, 1.0], atol=1e-6)

    def test_two_mode_interior_start(self):
        _, r = two_mode_fixture()
        res = solve(r.as_nlp(), [0.5, 0.5, 0.5])
        assert res.converged
        assert -1.0 - 1e-9 <= res.cost <= 1e-9

    def test_convex_qp_recovered(self, rng):
        for _ in range(10):
            M = rng.normal(size=(3, 3))
            H = M @ M.T + 0.5 * np.eye(3)
            g = rng.normal(size=3)
            A = rng.normal(size=(4, 3))
            b = rng.uniform(0.1, 1.0, 4)
            res = solve(quadratic_nlp(H, g, A, b, lower=-5, upper=5), np.zeros(3),
                        SqpSettings(max_iter=200, tol_kkt=1e-10))
            x_ref = brute_force_qp(H, g, np.vstack([A, np.eye(3), -np.eye(3)]), np.concatenate([b, np.full(6, 5.0)]))
            np.testing.assert_allclose(res.u_star, x_ref, atol=1e-8)

    def test_reported_kkt_matches_recomputation(self, rng):
        _, r = two_mode_fixture()
        nlp = r.as_nlp()
        res = solve(nlp, [-0.5, 0.1, 0.9])
        assert kkt_residual(nlp, res.u_star, res.multipliers) == pytest.approx(res.kkt_residual, abs=1e-10)

    def test_merit_nonincreasing(self, pt, table, hcfg):
        from bevshift.horizon import MpcMemory, ReferencePreview, build_condensed
        from bevshift.powertrain import PowertrainState
        from bevshift.relaxation import relax

        mem = MpcMemory(0.0, PowertrainState(0.0, 10.0, 0.8), 2)
        prog = build_condensed(mem, ReferencePreview.from_speeds(np.linspace(10, 14, 9), 22.5, 1.0), hcfg, pt, table)
        r = relax(prog)
        nlp = r.as_nlp()
        x0 = np.concatenate([np.full(r.n_u, 0.1), np.full(r.n_v, 1.0 / r.n_v)])
        res = solve(nlp, x0)
        assert res.merit_trace
        for before, after in res.merit_trace:
            assert after <= before + 1e-12

    def test_deterministic(self):
        _, r = two_mode_fixture()
        a = solve(r.as_nlp(), [0.3, 0.4, 0.6])
        b = solve(r.as_nlp(), [0.3, 0.4, 0.6])
        assert a.iterations == b.iterations
        assert np.array_equal(a.u_star, b.u_star) and a.cost == b.cost

    def test_iteration_limit_status(self):
        nlp = NlpProblem(2, lambda x: (1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2,
                         lambda x: np.array([-2 * (1 - x[0]) - 400 * x[0] * (x[1] - x[0] ** 2),
                                             200 * (x[1] - x[0] ** 2)]),
                         lambda x: np.zeros(0), lambda x: np.zeros((0, 2)), -5, 5)
        res = solve(nlp, [-1.2, 1.0], SqpSettings(max_iter=2))
        assert res.status is SqpStatus.ITER_LIMIT and res.iterations == 2

    def test_callback_failure_carries_iterate(self):
        def bad(x):
            raise RuntimeError("boom")

        nlp = NlpProblem(1, bad, bad, bad, bad, -1, 1)
        with pytest.raises(CallbackFailure) as exc:
            solve(nlp, [0.2])
        assert exc.value.iterate is not None

    def test_settings_validation(self):
        with pytest.raises(ValueError):
            SqpSettings(max_iter=0)
        with pytest.raises(ValueError):
            SqpSettings(tol_kkt=0.0)
