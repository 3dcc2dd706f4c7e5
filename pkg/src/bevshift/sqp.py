"""Dense SQP for smooth NLPs with inequalities, linear equalities and bounds.

The QP subproblems are solved with a dual active-set method (start at the
unconstrained minimizer, add the most violated constraint, drop constraints
whose multipliers would turn negative).  The Hessian model is a Powell-damped
BFGS matrix and globalization uses backtracking on the l1 merit function.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, NamedTuple

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from bevshift.errors import CallbackFailure, LineSearchFail, ModelDomainError, QpInfeasible


class SqpStatus(str, Enum):
    CONVERGED = "Converged"
    ITER_LIMIT = "IterLimit"
    INFEASIBLE = "Infeasible"
    LINE_SEARCH_FAIL = "LineSearchFail"


@dataclass
class NlpProblem:
    """``min cost(x)  s.t.  ineq(x) <= 0,  A_eq x = b_eq,  lower <= x <= upper``."""

    dim: int
    cost: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    ineq: Callable[[np.ndarray], np.ndarray]
    ineq_jac: Callable[[np.ndarray], np.ndarray]
    lower: np.ndarray
    upper: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    # optional fast path returning (cost, grad, ineq, ineq_jac) in one call
    evaluate: Callable[[np.ndarray], tuple] | None = None

    def __post_init__(self):
        self.lower = np.broadcast_to(np.asarray(self.lower, float), (self.dim,)).copy()
        self.upper = np.broadcast_to(np.asarray(self.upper, float), (self.dim,)).copy()
        if self.A_eq is not None:
            self.A_eq = np.atleast_2d(np.asarray(self.A_eq, float))
            self.b_eq = np.atleast_1d(np.asarray(self.b_eq, float))

    def eval_all(self, x):
        if self.evaluate is not None:
            f, g, c, J = self.evaluate(x)
        else:
            f, g, c, J = self.cost(x), self.grad(x), self.ineq(x), self.ineq_jac(x)
        c = np.atleast_1d(np.asarray(c, float))
        return float(f), np.asarray(g, float), c, np.asarray(J, float).reshape(c.size, self.dim)


@dataclass(frozen=True)
class SqpSettings:
    max_iter: int = 50
    tol_kkt: float = 1e-6
    penalty_init: float = 1.0
    penalty_margin: float = 1.5
    ls_contraction: float = 0.5
    ls_armijo: float = 1e-4
    ls_min_step: float = 1e-6
    bfgs_damping: float = 0.2
    hessian_init: float = 1.0
    trust_radius: float = 10.0
    elastic_weight: float = 100.0
    hessian_cond_max: float = 1e6

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.tol_kkt <= 0:
            raise ValueError("tol_kkt must be > 0")


@dataclass
class Multipliers:
    ineq: np.ndarray
    eq: np.ndarray
    lower: np.ndarray
    upper: np.ndarray


@dataclass
class SqpResult:
    u_star: np.ndarray
    status: SqpStatus
    kkt_residual: float
    iterations: int
    wall_time: float
    cost: float
    max_violation: float
    multipliers: Multipliers
    # (merit before, merit after) per accepted step, same penalty parameter
    merit_trace: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status is SqpStatus.CONVERGED


# ---------------------------------------------------------------------------
# QP subproblem


class QpResult(NamedTuple):
    step: np.ndarray
    lam: np.ndarray  # general inequality rows
    nu: np.ndarray  # equality rows
    z_lower: np.ndarray
    z_upper: np.ndarray
    iterations: int


def qp_subproblem(H, grad, A_in=None, b_in=None, A_eq=None, b_eq=None, lower=None, upper=None,
                  max_iter: int | None = None) -> QpResult:
    """Solve ``min 1/2 d'Hd + grad'd`` subject to ``A_in d <= b_in``, ``A_eq d = b_eq``
    and ``lower <= d <= upper`` (bounds may include a trust box).

    Raises:
        QpInfeasible: if the constraints admit no point.
    """
    H = np.asarray(H, float)
    gvec = np.asarray(grad, float)
    n = gvec.size
    A_in = np.zeros((0, n)) if A_in is None else np.atleast_2d(np.asarray(A_in, float)).reshape(-1, n)
    b_in = np.zeros(0) if b_in is None else np.atleast_1d(np.asarray(b_in, float))
    E = np.zeros((0, n)) if A_eq is None else np.atleast_2d(np.asarray(A_eq, float)).reshape(-1, n)
    e = np.zeros(0) if b_eq is None else np.atleast_1d(np.asarray(b_eq, float))
    lower = np.full(n, -np.inf) if lower is None else np.broadcast_to(np.asarray(lower, float), (n,))
    upper = np.full(n, np.inf) if upper is None else np.broadcast_to(np.asarray(upper, float), (n,))
    if np.any(lower > upper):
        raise QpInfeasible("bounds cross")

    lo_idx = np.flatnonzero(np.isfinite(lower))
    hi_idx = np.flatnonzero(np.isfinite(upper))
    eye = np.eye(n)
    A = np.vstack([A_in, -eye[lo_idx], eye[hi_idx]])
    b = np.concatenate([b_in, -lower[lo_idx], upper[hi_idx]])
    mi, ne = A.shape[0], E.shape[0]

    try:
        chol = cho_factor(H)
    except np.linalg.LinAlgError as exc:
        raise ValueError("QP Hessian must be positive definite") from exc
    Hinv = cho_solve(chol, eye)
    scale = 1.0 + np.max(np.abs(b), initial=0.0) + np.max(np.abs(e), initial=0.0)
    tol = 1e-11 * scale

    active: list[int] = []
    lam = np.zeros(mi)

    def constraint_matrix():
        return np.vstack([E, A[active]]) if active else E

    def solve_kkt():
        C = constraint_matrix()
        rhs = np.concatenate([e, b[active]])
        if C.shape[0] == 0:
            return -Hinv @ gvec, np.zeros(0)
        HC = Hinv @ C.T
        mu = -np.linalg.solve(C @ HC, rhs + C @ (Hinv @ gvec))
        return -Hinv @ (gvec + C.T @ mu), mu

    try:
        x, mu = solve_kkt()
    except np.linalg.LinAlgError as exc:
        raise QpInfeasible("dependent equality constraints") from exc
    nu = mu[:ne].copy()
    if ne and np.max(np.abs(E @ x - e)) > 1e-8 * scale:
        raise QpInfeasible("inconsistent equality constraints")

    cap = max_iter if max_iter is not None else 20 * (n + mi) + 50
    it = 0
    while True:
        viol = A @ x - b
        if active:
            viol[active] = -np.inf
        p = int(np.argmax(viol)) if mi else -1
        if mi == 0 or viol[p] <= tol:
            break
        a = A[p]
        lam_p = 0.0
        while True:
            it += 1
            if it > cap:
                raise QpInfeasible("active-set iteration limit")
            C = constraint_matrix()
            if C.shape[0]:
                HC = Hinv @ C.T
                try:
                    r = -np.linalg.solve(C @ HC, HC.T @ a)
                except np.linalg.LinAlgError:
                    r = -np.linalg.lstsq(C @ HC, HC.T @ a, rcond=None)[0]
                z = -Hinv @ (a + C.T @ r)
            else:
                r = np.zeros(0)
                z = -Hinv @ a
            r_in = r[ne:]
            t1, block = np.inf, -1
            for j, idx in enumerate(active):
                if r_in[j] < -1e-14:
                    ratio = lam[idx] / -r_in[j]
                    if ratio < t1:
                        t1, block = ratio, j
            az = float(a @ z)
            if az > -1e-14 * (1.0 + a @ a):
                if block < 0:
                    raise QpInfeasible(f"constraint row {p} cannot be satisfied")
                t = t1
                for j, idx in enumerate(active):
                    lam[idx] += t * r_in[j]
                nu += t * r[:ne]
                lam_p += t
                lam[active[block]] = 0.0
                active.pop(block)
                continue
            t2 = float(a @ x - b[p]) / -az
            t = min(t1, t2)
            x = x + t * z
            for j, idx in enumerate(active):
                lam[idx] += t * r_in[j]
            nu += t * r[:ne]
            lam_p += t
            if t2 <= t1:
                active.append(p)
                lam[p] = lam_p
                break
            lam[active[block]] = 0.0
            active.pop(block)

    # clean final solve on the identified active set
    try:
        x_c, mu = solve_kkt()
        if not np.any(A @ x_c - b > 1e3 * tol + 1e-9):
            x = x_c
            nu = mu[:ne]
            lam[:] = 0.0
            lam[active] = np.maximum(mu[ne:], 0.0)
    except np.linalg.LinAlgError:
        pass

    m_gen = A_in.shape[0]
    z_lower = np.zeros(n)
    z_upper = np.zeros(n)
    z_lower[lo_idx] = lam[m_gen:m_gen + lo_idx.size]
    z_upper[hi_idx] = lam[m_gen + lo_idx.size:]
    return QpResult(x, lam[:m_gen].copy(), np.asarray(nu, float).copy(), z_lower, z_upper, it)


# ---------------------------------------------------------------------------
# Hessian update and line search


def bfgs_update(H, s, y, damping: float = 0.2):
    """Powell-damped BFGS update; the result stays symmetric positive definite."""
    H = np.asarray(H, float)
    s = np.asarray(s, float)
    y = np.asarray(y, float)
    Hs = H @ s
    sHs = float(s @ Hs)
    if sHs <= 1e-300 or not np.isfinite(sHs):
        return H.copy()
    sy = float(s @ y)
    if sy >= damping * sHs:
        r = y
    else:
        theta = (1.0 - damping) * sHs / (sHs - sy)
        r = theta * y + (1.0 - theta) * Hs
    sr = float(s @ r)
    H_new = H - np.outer(Hs, Hs) / sHs + np.outer(r, r) / sr
    return 0.5 * (H_new + H_new.T)


def _condition(H, cond_max: float):
    """Floor the spectrum of ``H`` at ``max eigenvalue / cond_max``."""
    w, V = np.linalg.eigh(H)
    floor = w[-1] / cond_max
    if w[0] >= floor:
        return H
    H = (V * np.maximum(w, floor)) @ V.T
    return 0.5 * (H + H.T)


def merit_line_search(merit: Callable[[float], float], phi0: float, slope: float,
                      armijo: float = 1e-4, contraction: float = 0.5, min_step: float = 1e-10) -> float:
    """Backtrack until ``merit(alpha) <= phi0 + armijo * alpha * slope``.

    ``merit`` may return ``inf`` for trial points outside the model domain.

    Raises:
        LineSearchFail: on a non-descent direction or when the step floor is hit.
    """
    if not slope < 0:
        raise LineSearchFail(f"direction is not a descent direction (slope {slope:.3e})")
    alpha = 1.0
    while alpha >= min_step:
        if merit(alpha) <= phi0 + armijo * alpha * slope:
            return alpha
        alpha *= contraction
    raise LineSearchFail("step length fell below the floor")


# ---------------------------------------------------------------------------
# SQP driver


def _violation_l1(c):
    return float(np.sum(np.maximum(c, 0.0)))


def _kkt(problem: NlpProblem, x, g, c, J, mult: Multipliers) -> float:
    stat = g + J.T @ mult.ineq - mult.lower + mult.upper
    feas = max(0.0, float(np.max(c, initial=0.0)))
    feas = max(feas, float(np.max(problem.lower - x, initial=0.0)), float(np.max(x - problem.upper, initial=0.0)))
    comp = float(np.max(np.abs(mult.ineq * c), initial=0.0))
    lo_gap = np.where(np.isfinite(problem.lower), x - problem.lower, 0.0)
    hi_gap = np.where(np.isfinite(problem.upper), problem.upper - x, 0.0)
    comp = max(comp, float(np.max(np.abs(mult.lower * lo_gap), initial=0.0)),
               float(np.max(np.abs(mult.upper * hi_gap), initial=0.0)))
    if problem.A_eq is not None:
        stat = stat + problem.A_eq.T @ mult.eq
        feas = max(feas, float(np.max(np.abs(problem.A_eq @ x - problem.b_eq))))
    return max(float(np.max(np.abs(stat), initial=0.0)), feas, comp)


def kkt_residual(problem: NlpProblem, x, mult: Multipliers) -> float:
    """Max of stationarity, primal infeasibility and complementarity at ``x``."""
    x = np.asarray(x, float)
    _, g, c, J = problem.eval_all(x)
    return _kkt(problem, x, g, c, J, mult)


def _project_start(problem: NlpProblem, x0):
    x = np.clip(np.asarray(x0, float), problem.lower, problem.upper)
    if problem.A_eq is not None and np.max(np.abs(problem.A_eq @ x - problem.b_eq)) > 1e-12:
        qp = qp_subproblem(np.eye(problem.dim), np.zeros(problem.dim), A_eq=problem.A_eq,
                           b_eq=problem.b_eq - problem.A_eq @ x,
                           lower=problem.lower - x, upper=problem.upper - x)
        x = np.clip(x + qp.step, problem.lower, problem.upper)
    return x


class _Step(NamedTuple):
    d: np.ndarray
    mult: Multipliers
    elastic: bool


def _qp_step(problem, x, g, c, J, H, settings, mu) -> _Step:
    n = problem.dim
    delta = settings.trust_radius
    lo = np.maximum(problem.lower - x, -delta)
    hi = np.minimum(problem.upper - x, delta)
    lo = np.minimum(lo, 0.0)
    hi = np.maximum(hi, 0.0)
    real_lo = problem.lower - x >= -delta
    real_hi = problem.upper - x <= delta
    A_eq = problem.A_eq
    b_eq = None if A_eq is None else problem.b_eq - A_eq @ x
    try:
        qp = qp_subproblem(H, g, J, -c, A_eq, b_eq, lo, hi)
        elastic = False
        d = qp.step
        lam = qp.lam
        nu, zl, zu = qp.nu, qp.z_lower, qp.z_upper
    except QpInfeasible:
        # l-infinity elastic mode: one shared slack on every linearized row
        rho = max(settings.elastic_weight, mu)
        He = np.zeros((n + 1, n + 1))
        He[:n, :n] = H
        He[n, n] = 1e-6 * np.trace(H) / n
        ge = np.append(g, rho)
        Je = np.hstack([J, -np.ones((J.shape[0], 1))])
        Ae = None if A_eq is None else np.hstack([A_eq, np.zeros((A_eq.shape[0], 1))])
        lo_e = np.append(lo, 0.0)
        hi_e = np.append(hi, np.inf)
        qp = qp_subproblem(He, ge, Je, -c, Ae, b_eq, lo_e, hi_e)
        elastic = True
        d = qp.step[:n]
        lam = qp.lam
        nu, zl, zu = qp.nu, qp.z_lower[:n], qp.z_upper[:n]
    zl = np.where(real_lo, zl, 0.0)
    zu = np.where(real_hi, zu, 0.0)
    return _Step(d, Multipliers(lam, nu if nu is not None else np.zeros(0), zl, zu), elastic)


def usable(res: SqpResult, feas_tol: float = 1e-6, stall_kkt: float = 1e-4) -> bool:
    """Whether a closed loop may apply ``res``.

    Converged results qualify.  So do feasible iteration-limit results, and
    feasible line-search stalls whose KKT residual is already below
    ``stall_kkt`` (the merit change is then lost in round-off).
    """
    if res.status is SqpStatus.CONVERGED:
        return True
    if res.max_violation > feas_tol:
        return False
    if res.status is SqpStatus.ITER_LIMIT:
        return True
    return res.status is SqpStatus.LINE_SEARCH_FAIL and res.kkt_residual <= stall_kkt


def solve(problem: NlpProblem, x0, settings: SqpSettings | None = None) -> SqpResult:
    """Run SQP from ``x0`` (projected onto bounds and linear equalities)."""
    settings = settings or SqpSettings()
    t_start = time.perf_counter()
    x = _project_start(problem, x0)
    try:
        f, g, c, J = problem.eval_all(x)
    except Exception as exc:  # noqa: BLE001 - re-raised with iterate context
        raise CallbackFailure(f"callback failed at start point: {exc}", iterate=x.copy()) from exc

    n = problem.dim
    H = settings.hessian_init * np.eye(n)
    mu = settings.penalty_init
    merit_trace: list = []
    status = SqpStatus.ITER_LIMIT
    mult = Multipliers(np.zeros(c.size), np.zeros(0 if problem.A_eq is None else problem.A_eq.shape[0]),
                       np.zeros(n), np.zeros(n))
    kkt = np.inf
    iterations = 0
    for it in range(settings.max_iter + 1):
        try:
            stp = _qp_step(problem, x, g, c, J, H, settings, mu)
        except QpInfeasible:
            status = SqpStatus.INFEASIBLE
            break
        mult = stp.mult
        kkt = _kkt(problem, x, g, c, J, mult)
        if kkt <= settings.tol_kkt and not stp.elastic:
            status = SqpStatus.CONVERGED
            break
        d = stp.d
        if stp.elastic and np.max(np.abs(d), initial=0.0) < 1e-10:
            status = SqpStatus.INFEASIBLE
            break
        if it == settings.max_iter:
            status = SqpStatus.ITER_LIMIT
            break
        if stp.elastic:
            # elastic multipliers are capped by the slack price; track it instead
            mu = max(mu, settings.elastic_weight)
        else:
            lam_max = float(np.max(np.abs(mult.ineq), initial=0.0))
            mu = max(mu, lam_max * settings.penalty_margin)
        v0 = _violation_l1(c)
        phi0 = f + mu * v0
        # a non-elastic step satisfies its linearization, so the predicted violation is zero
        v_lin = _violation_l1(c + J @ d) if stp.elastic else 0.0
        slope = float(g @ d) - mu * (v0 - v_lin)
        trial: dict = {}

        def merit(alpha):
            xt = np.clip(x + alpha * d, problem.lower, problem.upper)
            try:
                out = problem.eval_all(xt)
            except ModelDomainError:
                return np.inf
            if not np.isfinite(out[0]) or not np.all(np.isfinite(out[2])):
                return np.inf
            trial["x"], trial["out"] = xt, out
            return out[0] + mu * _violation_l1(out[2])

        try:
            # the last trial evaluated is the accepted one
            merit_line_search(merit, phi0, slope, settings.ls_armijo, settings.ls_contraction, settings.ls_min_step)
        except LineSearchFail:
            status = SqpStatus.LINE_SEARCH_FAIL
            break
        x_new = trial["x"]
        f_new, g_new, c_new, J_new = trial["out"]
        merit_trace.append((phi0, f_new + mu * _violation_l1(c_new)))
        y = (g_new + J_new.T @ mult.ineq) - (g + J.T @ mult.ineq)
        s_k = x_new - x
        if it == 0 and float(s_k @ y) > 0:
            # Shanno-Phua: rescale the initial matrix to the observed curvature
            H = float(y @ y) / float(s_k @ y) * np.eye(n)
        H = _condition(bfgs_update(H, s_k, y, settings.bfgs_damping), settings.hessian_cond_max)
        x, f, g, c, J = x_new, f_new, g_new, c_new, J_new
        iterations = it + 1

    return SqpResult(
        u_star=x,
        status=status,
        kkt_residual=float(kkt),
        iterations=iterations,
        wall_time=time.perf_counter() - t_start,
        cost=float(f),
        max_violation=max(0.0, float(np.max(c, initial=0.0))),
        multipliers=mult,
        merit_trace=merit_trace,
    )
