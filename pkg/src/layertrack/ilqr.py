"""
Iterative LQR over a discrete map x_{t+1} = f(x_t, v_t) with quadratic costs.

Costs are sums of terms (M x_t - target)^T W (M x_t - target) at chosen time
indices plus v^T R v on every input.  An optional terminal equality E x_N = 0 is
imposed by a quadratic penalty whose weight is escalated across outer loops.
Jacobians come from central finite differences, vectorized over the horizon.

Used here to produce "easy to track" unicycle references: the map is the RK4
closed loop of the unicycle policy with the reference velocity as input.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import numpy.typing as npt

from layertrack.controllers import UnicyclePolicyGains, unicycle_closed_loop_step
from layertrack.dynamics import UNICYCLE_DT
from layertrack.errors import SolverFailure
from layertrack.trajgen import WaypointSet

Array = npt.NDArray[np.float64]
Dynamics = Callable[[Array, Array], Array]

logger = logging.getLogger(__name__)

FD_STEP = 1e-5
LINE_SEARCH_STEPS = tuple(2.0**-k for k in range(11))


@dataclass(frozen=True)
class QuadTerm:
    t: int
    M: Array  # (k, n)
    target: Array  # (k,)
    W: Array  # (k, k)


@dataclass
class IlqrProblem:
    dynamics: Dynamics  # vectorized over leading axes
    x0: Array
    horizon: int
    R: Array  # input cost, positive definite
    terms: list[QuadTerm] = field(default_factory=list)
    terminal_equality: Array | None = None  # E with E x_N -> 0
    penalty_weight: float = 10.0
    penalty_growth: float = 10.0
    max_outer: int = 4
    equality_tol: float = 1e-3
    max_iter: int = 200
    rel_tol: float = 1e-6

    def __post_init__(self) -> None:
        self.x0 = np.asarray(self.x0, dtype=float)
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        assert np.all(np.linalg.eigvalsh(0.5 * (self.R + self.R.T)) > 0.0), "R must be positive definite"
        for term in self.terms:
            assert 0 <= term.t <= self.horizon, f"cost term at t={term.t} outside horizon"

    @property
    def n(self) -> int:
        return self.x0.shape[0]

    @property
    def m(self) -> int:
        return self.R.shape[0]


@dataclass
class IlqrSolution:
    states: Array  # (N + 1, n)
    inputs: Array  # (N, m)
    cost: float  # objective including the final equality penalty
    iterations: int
    converged: bool
    terminal_violation: float
    cost_history: list[float]


def linearize(dynamics: Dynamics, x: Array, v: Array, eps: float = FD_STEP) -> tuple[Array, Array]:
    """
    Central-difference Jacobians of the discrete map.
    Works on a single point or a batch: x (..., n), v (..., m) -> A (..., n, n), B (..., n, m).
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    n, m = x.shape[-1], v.shape[-1]
    lead = x.shape[:-1]
    d = n + m
    # perturbation batch: (..., 2d, n) / (..., 2d, m)
    px = np.broadcast_to(x[..., None, :], lead + (2 * d, n)).copy()
    pv = np.broadcast_to(v[..., None, :], lead + (2 * d, m)).copy()
    idx = np.arange(d)
    for sign, off in ((1.0, 0), (-1.0, d)):
        rows = idx[:n] + off
        px[..., rows, idx[:n]] += sign * eps
        rows = idx[n:] + off
        pv[..., rows, idx[n:] - n] += sign * eps
    out = np.asarray(dynamics(px, pv), dtype=float)
    if not np.all(np.isfinite(out)):
        raise SolverFailure("non-finite dynamics evaluation during linearization")
    J = (out[..., :d, :] - out[..., d:, :]) / (2.0 * eps)  # (..., d, n): row j = d f / d z_j
    J = np.swapaxes(J, -1, -2)
    return J[..., :, :n], J[..., :, n:]


def _rollout(problem: IlqrProblem, inputs: Array) -> Array:
    xs = np.empty((problem.horizon + 1, problem.n))
    xs[0] = problem.x0
    for t in range(problem.horizon):
        xs[t + 1] = problem.dynamics(xs[t], inputs[t])
    return xs


class _QuadraticCost:
    """Pre-assembled Hessians and gradient pieces of the state cost for one penalty weight."""

    def __init__(self, problem: IlqrProblem, weight: float):
        N, n = problem.horizon, problem.n
        self.R = problem.R
        self.Hxx = np.zeros((N + 1, n, n))
        self.terms_by_t: dict[int, list[tuple[Array, Array, Array]]] = {}
        for term in problem.terms:
            self.Hxx[term.t] += 2.0 * term.M.T @ term.W @ term.M
            self.terms_by_t.setdefault(term.t, []).append((term.M, term.target, term.W))
        self.E = problem.terminal_equality
        self.weight = weight
        if self.E is not None:
            self.Hxx[N] += 2.0 * weight * self.E.T @ self.E

    def total(self, xs: Array, us: Array) -> float:
        c = float(np.einsum("ti,ij,tj->", us, self.R, us))
        for t, items in self.terms_by_t.items():
            for M, target, W in items:
                e = M @ xs[t] - target
                c += float(e @ W @ e)
        if self.E is not None:
            e = self.E @ xs[-1]
            c += self.weight * float(e @ e)
        return c

    def grad_x(self, xs: Array) -> Array:
        g = np.zeros_like(xs)
        for t, items in self.terms_by_t.items():
            for M, target, W in items:
                g[t] += 2.0 * M.T @ W @ (M @ xs[t] - target)
        if self.E is not None:
            g[-1] += 2.0 * self.weight * self.E.T @ (self.E @ xs[-1])
        return g


def _backward_pass(As, Bs, lx, Hxx, us, R, reg):
    N, n, m = Bs.shape
    ks = np.empty((N, m))
    Ks = np.empty((N, m, n))
    Vx = lx[N].copy()
    Vxx = Hxx[N].copy()
    R2 = 2.0 * R
    for t in range(N - 1, -1, -1):
        A, B = As[t], Bs[t]
        Qx = lx[t] + A.T @ Vx
        Qu = R2 @ us[t] + B.T @ Vx
        Qxx = Hxx[t] + A.T @ Vxx @ A
        Quu = R2 + B.T @ Vxx @ B + reg * np.eye(m)
        Qux = B.T @ Vxx @ A
        try:
            L = np.linalg.cholesky(0.5 * (Quu + Quu.T))
        except np.linalg.LinAlgError:
            return None
        k = -np.linalg.solve(L.T, np.linalg.solve(L, Qu))
        K = -np.linalg.solve(L.T, np.linalg.solve(L, Qux))
        ks[t], Ks[t] = k, K
        Vx = Qx + K.T @ Quu @ k + K.T @ Qu + Qux.T @ k
        Vxx = Qxx + K.T @ Quu @ K + K.T @ Qux + Qux.T @ K
        Vxx = 0.5 * (Vxx + Vxx.T)
    return ks, Ks


def _inner_ilqr(problem: IlqrProblem, cost: _QuadraticCost, us: Array, history: list[float]):
    xs = _rollout(problem, us)
    J = cost.total(xs, us)
    history.append(J)
    reg, reg_min, reg_max = 1e-6, 1e-6, 1e10
    converged = False
    it = 0
    for it in range(1, problem.max_iter + 1):
        As, Bs = linearize(problem.dynamics, xs[:-1], us)
        lx = cost.grad_x(xs)
        while True:
            res = _backward_pass(As, Bs, lx, cost.Hxx, us, problem.R, reg)
            if res is not None:
                break
            reg *= 10.0
            if reg > reg_max:
                raise SolverFailure("backward pass not positive definite at maximum regularization")
        ks, Ks = res
        accepted = False
        for alpha in LINE_SEARCH_STEPS:
            new_xs = np.empty_like(xs)
            new_us = np.empty_like(us)
            new_xs[0] = problem.x0
            for t in range(problem.horizon):
                new_us[t] = us[t] + alpha * ks[t] + Ks[t] @ (new_xs[t] - xs[t])
                new_xs[t + 1] = problem.dynamics(new_xs[t], new_us[t])
            if not np.all(np.isfinite(new_xs)):
                continue
            J_new = cost.total(new_xs, new_us)
            if J_new < J:
                accepted = True
                break
        if not accepted:
            logger.debug("iLQR line search exhausted at iteration %d", it)
            return xs, us, J, it, False
        rel = (J - J_new) / max(abs(J), 1e-300)
        xs, us, J = new_xs, new_us, J_new
        history.append(J)
        reg = max(reg_min, reg / 10.0)
        if rel < problem.rel_tol:
            converged = True
            break
    return xs, us, J, it, converged


def solve_ilqr(problem: IlqrProblem, init: Array) -> IlqrSolution:
    """
    Run iLQR from the input sequence ``init`` (length N).

    :raises SolverFailure: if the backward pass cannot be made positive definite.
    """
    us = np.array(init, dtype=float).reshape(problem.horizon, problem.m)
    history: list[float] = []
    weight = problem.penalty_weight
    total_iters = 0
    n_outer = problem.max_outer if problem.terminal_equality is not None else 1
    xs, J, converged, violation = None, np.inf, False, 0.0
    for outer in range(n_outer):
        cost = _QuadraticCost(problem, weight)
        xs, us, J, iters, converged = _inner_ilqr(problem, cost, us, history)
        total_iters += iters
        violation = 0.0 if problem.terminal_equality is None else float(np.linalg.norm(problem.terminal_equality @ xs[-1]))
        if violation < problem.equality_tol:
            break
        if outer < n_outer - 1:
            weight *= problem.penalty_growth
    converged = converged and violation < problem.equality_tol
    return IlqrSolution(xs, us, J, total_iters, converged, violation, history)


def unicycle_reference_problem(
    x0: Array,
    wps: WaypointSet,
    horizon: int,
    dt: float = UNICYCLE_DT,
    gains: UnicyclePolicyGains | None = None,
    input_weight: float = 0.1,
    waypoint_weight: float = 1.0,
) -> IlqrProblem:
    """
    Reference-generation problem over xbar = (x, r) with input r':
    waypoints penalize the state block, x_0 = r_0 by construction, x_N = r_N by penalty.
    Waypoints at t = 0 are skipped since the initial state is fixed.
    """
    x0 = np.asarray(x0, dtype=float)
    S = np.hstack([np.eye(3), np.zeros((3, 3))])
    terms = [
        QuadTerm(int(t), S, np.asarray(w, float), waypoint_weight * np.eye(3))
        for t, w in zip(wps.steps(dt), wps.points)
        if t > 0
    ]
    return IlqrProblem(
        dynamics=lambda z, v: unicycle_closed_loop_step(z, v, dt, gains),
        x0=np.concatenate([x0, x0]),
        horizon=horizon,
        R=input_weight * np.eye(3),
        terms=terms,
        terminal_equality=np.hstack([np.eye(3), -np.eye(3)]),
    )


def straight_line_init(x0: Array, goal: Array, horizon: int, dt: float) -> Array:
    """Constant reference velocity carrying r from x0 to the goal over the horizon."""
    rate = (np.asarray(goal, float) - np.asarray(x0, float)) / (horizon * dt)
    return np.tile(rate, (horizon, 1))
