"""Simplex relaxation of finite-mode programs, rounding and small-instance certification.

A program ``min_{u, v} f(u, v) s.t. g(u, v) <= 0`` with ``v`` ranging over
``n_v`` modes is rewritten with a weight vector ``p`` on the standard simplex:
the cost becomes ``sum_j p_j f(u, j)`` and every row of mode ``j`` is
multiplied by ``p_j``.  At a vertex of the simplex this is the original
program, so any weight that stays strictly positive at a solution certifies
feasibility of the corresponding mode.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from bevshift.errors import RoundingUnsound
from bevshift.horizon import CondensedProgram
from bevshift.sqp import NlpProblem

TOL_POS = 1e-6
TOL_FEAS = 1e-6
VERTEX_THRESHOLD = 0.95


@dataclass(frozen=True)
class SimplexPoint:
    p: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        if p.ndim != 1 or p.size == 0:
            raise ValueError("simplex point must be a non-empty vector")
        if np.any(p < -1e-9) or np.any(p > 1 + 1e-9) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("weights must lie in [0, 1] and sum to 1")
        object.__setattr__(self, "p", p)

    def is_vertex(self, threshold: float = VERTEX_THRESHOLD) -> bool:
        return bool(np.max(self.p) >= threshold)

    @classmethod
    def vertex(cls, n: int, i: int) -> SimplexPoint:
        p = np.zeros(n)
        p[i] = 1.0
        return cls(p)

    @classmethod
    def center(cls, n: int) -> SimplexPoint:
        return cls(np.full(n, 1.0 / n))


@dataclass
class RelaxedProgram:
    """Relaxed program in the stacked decision ``x = (u, p)``."""

    base: CondensedProgram
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_u(self) -> int:
        return self.base.n_u

    @property
    def n_v(self) -> int:
        return self.base.n_v

    @property
    def dim(self) -> int:
        return self.base.n_u + self.base.n_v

    @property
    def n_ineq(self) -> int:
        return self.base.m * self.base.n_v

    def _batch(self, u):
        key = u.tobytes()
        if self._cache.get("key") != key:
            self._cache["key"] = key
            self._cache["val"] = self.base.batch(u)
        return self._cache["val"]

    def cost(self, u, p) -> float:
        b = self._batch(np.asarray(u, float))
        return float(np.asarray(p, float) @ b.f)

    def constraints(self, u, p) -> np.ndarray:
        """Rows ``p_j * g_r(u, j)`` flattened mode-major."""
        b = self._batch(np.asarray(u, float))
        return (np.asarray(p, float)[:, None] * b.g).ravel()

    def evaluate(self, x):
        """Cost, gradient, constraints and Jacobian in ``x = (u, p)``."""
        x = np.asarray(x, float)
        n_u, n_v, m = self.n_u, self.n_v, self.base.m
        u, p = x[:n_u], x[n_u:]
        b = self._batch(u)
        f = float(p @ b.f)
        grad = np.concatenate([p @ b.df, b.f])
        c = (p[:, None] * b.g).ravel()
        J = np.zeros((n_v * m, n_u + n_v))
        J[:, :n_u] = (p[:, None, None] * b.dg).reshape(n_v * m, n_u)
        rows = np.arange(n_v * m)
        J[rows, n_u + rows // m] = b.g.ravel()
        return f, grad, c, J

    def as_nlp(self, u_scale=None, cost_scale: float = 1.0, cost_offset: float = 0.0) -> NlpProblem:
        """NLP in scaled variables ``x = (u / u_scale, p)`` with the simplex equality.

        ``cost_offset`` is subtracted from every mode cost.  On the simplex this
        shifts the objective by a constant, so minimizers are unchanged, but it
        keeps the ``p`` gradient on the scale of the differences between modes.
        """
        n_u, n_v = self.n_u, self.n_v
        if u_scale is None:
            u_scale = self.base.u_scale if self.base.u_scale is not None else np.ones(n_u)
        scale = np.concatenate([np.broadcast_to(np.asarray(u_scale, float), (n_u,)), np.ones(n_v)])
        cs = float(cost_scale)

        off = float(cost_offset)

        def evaluate(xs):
            f, g, c, J = self.evaluate(xs * scale)
            f -= off * float(np.sum(xs[n_u:]))
            g = g.copy()
            g[n_u:] -= off
            return cs * f, cs * g * scale, c, J * scale

        lower = np.concatenate([self.base.u_lower, np.zeros(n_v)]) / scale
        upper = np.concatenate([self.base.u_upper, np.ones(n_v)]) / scale
        A = np.concatenate([np.zeros(n_u), np.ones(n_v)])[None, :]
        return NlpProblem(
            dim=n_u + n_v,
            cost=lambda x: evaluate(x)[0],
            grad=lambda x: evaluate(x)[1],
            ineq=lambda x: evaluate(x)[2],
            ineq_jac=lambda x: evaluate(x)[3],
            lower=lower,
            upper=upper,
            A_eq=A,
            b_eq=np.array([1.0]),
            evaluate=evaluate,
        )


def relax(prog: CondensedProgram) -> RelaxedProgram:
    if prog.n_v < 1:
        raise ValueError("program needs at least one mode")
    return RelaxedProgram(prog)


@dataclass(frozen=True)
class RoundedSolution:
    u_bar: np.ndarray
    p_bar: np.ndarray
    mode_index: int  # 0-based
    cost_gap: float
    is_certified_local: bool
    mode_cost: float
    mode_violation: float

    @property
    def max_p(self) -> float:
        return float(np.max(self.p_bar))


def round_solution(u_bar, p_bar, prog: CondensedProgram, tol_pos: float = TOL_POS,
                   vertex_threshold: float = VERTEX_THRESHOLD) -> RoundedSolution:
    """Pick the mode with the largest weight (lowest index on ties).

    Raises:
        RoundingUnsound: if the largest weight is not above ``tol_pos``.
    """
    u_bar = np.asarray(u_bar, float)
    p_bar = np.asarray(p_bar, float)
    i = int(np.argmax(p_bar))  # first maximum on ties
    if not p_bar[i] > tol_pos:
        raise RoundingUnsound(f"largest simplex weight {p_bar[i]:.3e} is not positive")
    b = prog.batch(u_bar)
    relaxed_cost = float(p_bar @ b.f)
    mode_cost = float(b.f[i])
    return RoundedSolution(
        u_bar=u_bar,
        p_bar=p_bar,
        mode_index=i,
        cost_gap=abs(relaxed_cost - mode_cost),
        is_certified_local=bool(p_bar[i] >= vertex_threshold),
        mode_cost=mode_cost,
        mode_violation=max(0.0, float(np.max(b.g[i], initial=0.0))),
    )


# interface name; ``round`` shadows the builtin only inside this namespace
round = round_solution  # noqa: A001


def two_mode_fixture() -> tuple[CondensedProgram, RelaxedProgram]:
    """Two modes sharing ``f = u``; mode 0 needs ``u >= 0``, mode 1 needs ``u >= -1``."""
    prog = CondensedProgram.from_functions(
        fs=[lambda u: u[0], lambda u: u[0]],
        gs=[lambda u: np.array([-u[0]]), lambda u: np.array([-(u[0] + 1.0)])],
        grad_fs=[lambda u: np.array([1.0]), lambda u: np.array([1.0])],
        jac_gs=[lambda u: np.array([[-1.0]]), lambda u: np.array([[-1.0]])],
        u_lower=[-10.0],
        u_upper=[10.0],
    )
    return prog, relax(prog)


@dataclass
class CertificationReport:
    relaxed_min: float
    relaxed_argmin: np.ndarray
    mode_mins: np.ndarray
    rounded_mode: int
    gap: float
    rounding_gap: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.gap <= self.tolerance and self.rounding_gap <= self.tolerance


def _simplex_grid(n_v: int, step: float) -> np.ndarray:
    k = int(round_half(1.0 / step))
    pts = [c for c in itertools.product(range(k + 1), repeat=n_v - 1) if sum(c) <= k]
    out = np.array([[*c, k - sum(c)] for c in pts], dtype=float) / k
    return out


def round_half(x: float) -> int:
    return int(np.floor(x + 0.5))


def certify_small_instance(prog: CondensedProgram, u_step: float = 1e-2, p_step: float = 0.05,
                           tol: float = 1e-3, refine: bool = True) -> CertificationReport:
    """Brute-force the relaxed minimum and each mode's minimum on a shared grid.

    The relaxed program is scanned on the ``u`` grid times a simplex grid; each
    mode's program is scanned on the same ``u`` grid.  Because the vertices
    belong to the simplex grid, the relaxed minimum can never exceed the best
    mode minimum; the report measures how far below it can get.
    """
    if prog.n_u > 2 or prog.n_v > 4:
        raise ValueError("certification is exhaustive and limited to n_u <= 2, n_v <= 4")
    axes = [np.arange(lo, hi + 0.5 * u_step, u_step) for lo, hi in zip(prog.u_lower, prog.u_upper)]
    grid = np.array(list(itertools.product(*axes)), dtype=float)
    F = np.empty((grid.shape[0], prog.n_v))
    G = np.empty((grid.shape[0], prog.n_v))
    for r, u in enumerate(grid):
        b = prog.batch(u)
        F[r] = b.f
        G[r] = np.max(b.g, axis=1)
    feas = G <= TOL_FEAS
    mode_mins = np.where(feas, F, np.inf).min(axis=0)

    P = _simplex_grid(prog.n_v, p_step)
    best, best_x = np.inf, None
    for pvec in P:
        # p_j g(u, j) <= 0 only constrains modes with positive weight
        ok = np.all(feas | (pvec[None, :] <= 0), axis=1)
        if not np.any(ok):
            continue
        vals = np.where(ok, F @ pvec, np.inf)
        r = int(np.argmin(vals))
        if vals[r] < best:
            best, best_x = float(vals[r]), np.concatenate([grid[r], pvec])
    if best_x is None:
        raise ValueError("no feasible grid point")
    u_bar, p_bar = best_x[: prog.n_u], best_x[prog.n_u:]
    rounded = round_solution(u_bar, p_bar, prog)
    return CertificationReport(
        relaxed_min=best,
        relaxed_argmin=best_x,
        mode_mins=mode_mins,
        rounded_mode=rounded.mode_index,
        gap=abs(best - float(np.min(mode_mins))),
        rounding_gap=rounded.cost_gap,
        tolerance=tol,
    )


remark1_fixture = two_mode_fixture  # interface name
