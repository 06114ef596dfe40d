"""
Dynamics-aware reference planning with a learned tracking penalty.

Both planners minimize

    sum_tau w ||r_tau - w_tau||^2 + exp(phi(x0, r_{0:N}))

Unicycle: over the raw samples r_{0:N}, by projected gradient descent with the
projection r_0 = x0.  Quadrotor: over piecewise-polynomial coefficients, with
r_{0:N} = B c per flat output, by L-BFGS.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import numpy.typing as npt

from layertrack.controllers import Se3Gains, rollout_quadrotor
from layertrack.dataset import (
    QUADROTOR_HORIZON,
    UNICYCLE_HORIZON,
    network_input,
    polynomial_reference,
    quadrotor_flat_state,
    tracking_cost,
)
from layertrack.dynamics import QUADROTOR_DT, UNICYCLE_DT, wrap_angle
from layertrack.errors import LayerTrackError, PlanningError
from layertrack.learner import MlpModel, phi_and_input_grad
from layertrack.optim import lbfgs
from layertrack.trajgen import PiecewisePolynomial, WaypointSet, basis_matrix, fit_min_jerk, sample_on_grid

Array = npt.NDArray[np.float64]

logger = logging.getLogger(__name__)


@dataclass
class PlannerOptions:
    max_iter: int | None = None  # None: 50 for PGD, 100 for L-BFGS
    rel_tol: float = 1e-6
    max_halvings: int = 20
    memory: int = 10  # L-BFGS only
    metric: str = "smooth"  # unicycle PGD: "smooth" (finite-difference metric) or "euclidean"
    metric_order: int = 2

    def __post_init__(self) -> None:
        assert (self.max_iter is None or self.max_iter >= 0) and self.max_halvings >= 0
        assert self.metric in ("smooth", "euclidean"), f"unknown metric {self.metric!r}"
        assert self.metric_order >= 1


@dataclass
class PlanSpec:
    x0: Array
    waypoints: WaypointSet
    model: MlpModel
    waypoint_weight: float = 1.0
    options: PlannerOptions = field(default_factory=PlannerOptions)
    horizon: int | None = None
    dt: float | None = None
    gains_hash: str | None = None  # fingerprint of the controller that will execute the plan
    omega0: Array | None = None  # quadrotor body rate at x0, for the yaw-rate input feature

    def check(self, system: str) -> None:
        if self.model.system != system:
            raise ValueError(f"model was trained for {self.model.system!r}, not {system!r}")
        if self.gains_hash is not None and self.model.gains_hash and self.gains_hash != self.model.gains_hash:
            warnings.warn(
                "penalty model was trained for a different controller (gains hash mismatch)", stacklevel=3
            )


@dataclass
class PlanResult:
    reference: Array  # (N + 1, n_r)
    trace: list[float]
    predicted_penalty: float
    converged: bool
    iterations: int
    poly: PiecewisePolynomial | None = None
    wall_time: float = 0.0


# --------------------------------------------------------------------------- shared objective pieces


def waypoint_term(r: Array, steps: Array, points: Array, weight: float, angle_dims: tuple[int, ...]):
    """Value and gradient (w.r.t. r) of weight * sum ||r_tau - w_tau||^2 with wrapped angle dims."""
    e = r[steps] - points
    for j in angle_dims:
        e[:, j] = wrap_angle(e[:, j])
    grad = np.zeros_like(r)
    np.add.at(grad, steps, 2.0 * weight * e)
    return weight * float(np.sum(e * e)), grad


def penalty_term(model: MlpModel, head: Array, r: Array) -> tuple[float, Array]:
    """exp(phi(head, r)) and its gradient with respect to r."""
    phi, g = phi_and_input_grad(model, np.concatenate([head, r.ravel()]))
    with np.errstate(over="ignore", invalid="ignore"):  # trial points far out may overflow; the line search rejects them
        pen = float(np.exp(phi))
        return pen, pen * g[len(head) :].reshape(r.shape)


def _active_waypoints(wps: WaypointSet, dt: float, skip_initial: bool) -> tuple[Array, Array]:
    steps = wps.steps(dt)
    keep = steps > 0 if skip_initial else np.ones(len(steps), bool)
    return steps[keep], wps.points[keep]


# --------------------------------------------------------------------------- unicycle


def project_initial(r: Array, x0: Array) -> Array:
    """Projection onto {r : r_0 = x0}; every other entry is left untouched."""
    out = np.array(r, dtype=float)
    out[0] = x0
    return out


def smoothing_metric(n_free: int, order: int = 1) -> Array:
    """
    Inverse of K^T K, K the order-th finite difference of (r_0, r_1, ..., r_n) with r_0 held fixed.

    Descent directions -P g are gradients measured in the norm ||K dr||, so a
    gradient concentrated on one sample is spread into a smooth bump instead of
    a spike.  K is square lower-triangular with unit diagonal, hence invertible.
    """
    K = np.linalg.matrix_power(np.eye(n_free) - np.eye(n_free, k=-1), order)
    Kinv = np.linalg.inv(K)
    return Kinv @ Kinv.T


def unicycle_objective(r: Array, x0: Array, steps: Array, points: Array, model: MlpModel, weight: float = 1.0):
    jw, gw = waypoint_term(r, steps, points, weight, (2,))
    pen, gp = penalty_term(model, np.asarray(x0, float), r)
    return jw + pen, gw + gp, pen


def plan_unicycle(spec: PlanSpec, init: Array | None = None) -> PlanResult:
    """
    Projected gradient descent on the unicycle planning objective.

    Initialized at the interpolating polynomial through (x0, waypoints).  The
    first trial step is 1 / max(2 w, ||g_0||); each iteration halves the trial
    step until the objective decreases (at most ``max_halvings`` times) and the
    next iteration starts from twice the accepted step.
    """
    t_start = time.perf_counter()
    spec.check("unicycle")
    dt = spec.dt or UNICYCLE_DT
    N = spec.horizon or UNICYCLE_HORIZON
    x0 = np.asarray(spec.x0, dtype=float)
    opts = spec.options
    steps, points = _active_waypoints(spec.waypoints, dt, skip_initial=True)
    r = polynomial_reference(spec.waypoints, N, dt) if init is None else np.asarray(init, float)
    r = project_initial(r, x0)

    def evaluate(ref):
        J, g, pen = unicycle_objective(ref, x0, steps, points, spec.model, spec.waypoint_weight)
        g[0] = 0.0  # the projection fixes r_0
        return J, g, pen

    P = smoothing_metric(N, opts.metric_order) if opts.metric == "smooth" else None

    def direction(grad):
        d = grad.copy()
        if P is not None:
            d[1:] = P @ grad[1:]
        return d

    J, g, pen = evaluate(r)
    if not np.isfinite(J):
        raise PlanningError("non-finite objective at initialization", [J])
    trace = [J]
    d = direction(g)
    step = 1.0 / max(2.0 * spec.waypoint_weight, float(np.linalg.norm(d)))
    converged = False
    it = 0
    max_iter = 50 if opts.max_iter is None else opts.max_iter
    for it in range(1, max_iter + 1):
        if not np.any(d):
            converged = True
            it -= 1
            break
        for _ in range(opts.max_halvings + 1):
            trial = project_initial(r - step * d, x0)
            J_t, g_t, pen_t = evaluate(trial)
            if np.isfinite(J_t) and J_t < J:
                break
            step *= 0.5
        else:
            logger.debug("PGD line search exhausted at iteration %d", it)
            it -= 1
            break
        rel = (J - J_t) / max(abs(J), 1e-300)
        r, J, g, pen = trial, J_t, g_t, pen_t
        d = direction(g)
        trace.append(J)
        step *= 2.0
        if rel < opts.rel_tol:
            converged = True
            break
    return PlanResult(r, trace, pen, converged, it, wall_time=time.perf_counter() - t_start)


# --------------------------------------------------------------------------- quadrotor


class QuadrotorObjective:
    """
    Planning objective as a function of stacked polynomial coefficients.

    ``c`` has shape (dims * n_seg * n_coeffs,), dimension-major; the sampled
    reference is r[:, j] = B @ c_j.
    """

    def __init__(self, structure: PiecewisePolynomial, spec: PlanSpec, dt: float, horizon: int):
        self.structure = structure
        self.dt = dt
        self.horizon = horizon
        times = structure.t_start + dt * np.arange(horizon + 1)
        times[-1] = min(times[-1], structure.t_end)
        self.times = times
        self.B = basis_matrix(structure, times)
        self.steps, self.points = _active_waypoints(spec.waypoints, dt, skip_initial=False)
        self.model = spec.model
        self.weight = spec.waypoint_weight
        self.head = quadrotor_flat_state(spec.x0, spec.omega0)
        self.shape = (structure.dims, structure.n_segments * structure.n_coeffs)

    def reference(self, c: Array) -> Array:
        return self.B @ np.asarray(c, float).reshape(self.shape).T

    def __call__(self, c: Array) -> tuple[float, Array]:
        r = self.reference(c)
        jw, gw = waypoint_term(r, self.steps, self.points, self.weight, (3,))
        pen, gp = penalty_term(self.model, self.head, r)
        with np.errstate(invalid="ignore", over="ignore"):
            grad_c = (self.B.T @ (gw + gp)).T
        return jw + pen, grad_c.ravel()

    def penalty(self, c: Array) -> float:
        return penalty_term(self.model, self.head, self.reference(c))[0]


VALUE_WEIGHT = 1e-6  # keeps the coefficient metric definite on constants and ramps


def coefficient_transform(structure: PiecewisePolynomial, times: Array, dt: float, options: PlannerOptions) -> Array:
    """
    Square map T with c = T z used as the optimization variable z.

    "smooth": T = L^{-T} for L L^T = dt^(2k) B_k^T B_k + VALUE_WEIGHT B_0^T B_0,
    B_k the k-th derivative basis on the sample grid (k = ``metric_order``); the
    Euclidean norm of z is then the sampled finite-difference norm used by the
    unicycle planner.  "euclidean": per-segment scaling by h^-k, which only
    fixes the conditioning of the monomial basis.
    """
    if options.metric == "euclidean":
        h = np.diff(structure.breaks)
        return np.diag(np.power(h[:, None], -np.arange(structure.n_coeffs)[None, :]).ravel())
    B0 = basis_matrix(structure, times)
    Bk = basis_matrix(structure, times, options.metric_order)
    M = dt ** (2 * options.metric_order) * Bk.T @ Bk + VALUE_WEIGHT * B0.T @ B0
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise PlanningError("coefficient metric is singular; the sample grid does not determine the polynomial") from exc
    return np.linalg.inv(L.T)


def plan_quadrotor(spec: PlanSpec, structure: PiecewisePolynomial | None = None) -> PlanResult:
    """
    L-BFGS over polynomial coefficients, initialized at the minimum-jerk fit.

    The coefficients are optimized through the linear change of variables of
    :func:`coefficient_transform`; the objective is unchanged, only the
    geometry the quasi-Newton steps start from.
    """
    t_start = time.perf_counter()
    spec.check("quadrotor")
    dt = spec.dt or QUADROTOR_DT
    N = spec.horizon or QUADROTOR_HORIZON
    init = fit_min_jerk(spec.waypoints) if structure is None else structure
    obj = QuadrotorObjective(init, spec, dt, N)

    T = coefficient_transform(init, obj.times, dt, spec.options)  # c_j = T z_j for every flat output j
    T_inv = np.linalg.inv(T)

    def transformed(z: Array) -> tuple[float, Array]:
        J, g = obj((z.reshape(obj.shape) @ T.T).ravel())
        return J, (g.reshape(obj.shape) @ T).ravel()

    z0 = (init.coeffs.reshape(obj.shape) @ T_inv.T).ravel()
    J0, _ = transformed(z0)
    if not np.isfinite(J0):
        raise PlanningError("non-finite objective at initialization", [J0])
    max_iter = 100 if spec.options.max_iter is None else spec.options.max_iter
    res = lbfgs(transformed, z0, memory=spec.options.memory, max_iter=max_iter, rel_tol=spec.options.rel_tol)
    if not np.isfinite(res.f):
        raise PlanningError("non-finite objective", res.trace)
    c = (res.x.reshape(obj.shape) @ T.T).ravel()
    poly = init.with_coeffs(c.reshape(init.coeffs.shape))
    return PlanResult(
        obj.reference(c),
        res.trace,
        obj.penalty(c),
        res.converged,
        res.n_iter,
        poly=poly,
        wall_time=time.perf_counter() - t_start,
    )


# --------------------------------------------------------------------------- replanning


@dataclass
class ReplanResult:
    states: Array  # (total_steps + 1, 15)
    inputs: Array
    window_costs: list[float]
    references: list[PiecewisePolynomial]
    fallbacks: int = 0

    @property
    def total_cost(self) -> float:
        return float(sum(self.window_costs))


def _window_spec(model, x0, wps, omega0, gains_hash, dt, horizon, options, weight) -> PlanSpec:
    return PlanSpec(x0, wps, model, weight, options or PlannerOptions(), horizon, dt, gains_hash, omega0)


def replan_loop(
    mission: list[WaypointSet],
    model: MlpModel,
    x0: Array,
    gains: Se3Gains | None = None,
    replan: bool = True,
    dt: float = QUADROTOR_DT,
    horizon: int = QUADROTOR_HORIZON,
    options: PlannerOptions | None = None,
    waypoint_weight: float = 1.0,
    rho: float | None = None,
) -> ReplanResult:
    """
    Execute a sequence of waypoint windows of ``horizon`` steps each.

    With ``replan`` the reference for each window is planned from the realized
    state (its first waypoint replaced by the current flat position and yaw).
    Without it, every window is planned up front from hover at its nominal first
    waypoint and then executed back to back.  A window whose plan fails falls
    back to its minimum-jerk reference.
    """
    from layertrack.controllers import gains_hash as _hash
    from layertrack.dataset import hover_state

    gains = gains or Se3Gains()
    ghash = _hash(gains)
    rho = model.rho if rho is None else rho
    fallbacks = 0

    def plan_window(x_start, wps, omega0):
        nonlocal fallbacks
        try:
            return plan_quadrotor(
                _window_spec(model, x_start, wps, omega0, ghash, dt, horizon, options, waypoint_weight)
            ).poly
        except LayerTrackError as exc:
            logger.warning("window plan failed (%s); falling back to minimum-jerk", exc)
            fallbacks += 1
            return fit_min_jerk(wps)

    if not replan:
        planned = [plan_window(hover_state(w.points[0]), w, None) for w in mission]

    x = np.asarray(x0, dtype=float)
    omega = None
    all_x, all_u, costs, refs = [x[None, :]], [], [], []
    for k, wps in enumerate(mission):
        if replan:
            flat = quadrotor_flat_state(x, omega)
            pts = wps.points.copy()
            pts[0] = flat[:4]
            poly = plan_window(x, WaypointSet(wps.times, pts), omega)
        else:
            poly = planned[k]
        xs, us = rollout_quadrotor(x, poly, horizon, dt, gains)
        r = sample_on_grid(poly, horizon, dt)
        costs.append(tracking_cost(xs, us, r, rho, system="quadrotor"))
        refs.append(poly)
        all_x.append(xs[1:])
        all_u.append(us)
        x, omega = xs[-1], us[-1, 1:4]
    return ReplanResult(np.concatenate(all_x), np.concatenate(all_u), costs, refs, fallbacks)
