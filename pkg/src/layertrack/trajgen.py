"""
Reference-trajectory generators.

Every polynomial here is stored per segment in *local* time (tau = t - t_start)
with ascending-power coefficients, which keeps the fits well conditioned.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from math import factorial
from typing import Sequence

import numpy as np
import numpy.typing as npt

from layertrack.errors import ConditioningError, InfeasibleSpecError, OutOfRangeError

Array = npt.NDArray[np.float64]

DEFAULT_ORDER = 7
MAX_VANDERMONDE_COND = 1e12
_SUPPORT_TOL = 1e-9


@dataclass(frozen=True)
class WaypointSet:
    times: Array  # [s], strictly increasing
    points: Array  # (W, dims)

    def __post_init__(self) -> None:
        times = np.asarray(self.times, dtype=float)
        points = np.asarray(self.points, dtype=float)
        if points.ndim != 2 or points.shape[0] != times.shape[0]:
            raise ValueError("waypoint times and points disagree in length")
        if np.any(np.diff(times) <= 0.0):
            raise ValueError("waypoint times must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "points", points)

    @property
    def dims(self) -> int:
        return int(self.points.shape[1])

    def steps(self, dt: float) -> Array:
        """Waypoint times as integer step indices on a grid of spacing ``dt``."""
        return np.rint(self.times / dt).astype(int)

    def to_dict(self) -> dict:
        return {"times": self.times.tolist(), "points": self.points.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "WaypointSet":
        return cls(np.asarray(d["times"], float), np.asarray(d["points"], float))


def _deriv_factors(n_coeffs: int, order: int) -> Array:
    """k!/(k-order)! for k < n_coeffs, zero where k < order."""
    out = np.zeros(n_coeffs)
    for k in range(order, n_coeffs):
        out[k] = factorial(k) / factorial(k - order)
    return out


def monomial_row(tau: float, n_coeffs: int, order: int = 0) -> Array:
    """Row r with r @ coeffs = d^order/dtau^order of sum_k coeffs[k] tau^k."""
    fac = _deriv_factors(n_coeffs, order)
    powers = np.clip(np.arange(n_coeffs) - order, 0, None)
    return fac * np.power(float(tau), powers)


@dataclass(frozen=True)
class PiecewisePolynomial:
    breaks: Array  # (n_seg + 1,) segment boundary times [s]
    coeffs: Array  # (dims, n_seg, n_coeffs), local-time ascending powers

    def __post_init__(self) -> None:
        breaks = np.asarray(self.breaks, dtype=float)
        coeffs = np.asarray(self.coeffs, dtype=float)
        if coeffs.ndim != 3 or coeffs.shape[1] != breaks.shape[0] - 1:
            raise ValueError("coeffs must be (dims, n_seg, n_coeffs) with n_seg = len(breaks) - 1")
        if np.any(np.diff(breaks) <= 0.0):
            raise ValueError("segment durations must be positive")
        if not np.all(np.isfinite(coeffs)):
            raise ValueError("coefficients must be finite")
        object.__setattr__(self, "breaks", breaks)
        object.__setattr__(self, "coeffs", coeffs)

    @property
    def dims(self) -> int:
        return self.coeffs.shape[0]

    @property
    def n_segments(self) -> int:
        return self.coeffs.shape[1]

    @property
    def n_coeffs(self) -> int:
        return self.coeffs.shape[2]

    @property
    def t_start(self) -> float:
        return float(self.breaks[0])

    @property
    def t_end(self) -> float:
        return float(self.breaks[-1])

    def locate(self, t) -> tuple[Array, Array]:
        """Segment index and local time for each query time."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if np.any(t < self.t_start - _SUPPORT_TOL) or np.any(t > self.t_end + _SUPPORT_TOL):
            raise OutOfRangeError(f"time outside polynomial support [{self.t_start}, {self.t_end}]")
        seg = np.clip(np.searchsorted(self.breaks, t, side="right") - 1, 0, self.n_segments - 1)
        return seg, t - self.breaks[seg]

    def __call__(self, t, order: int = 0) -> Array:
        return eval_poly(self, t, order)

    def with_coeffs(self, coeffs: Array) -> "PiecewisePolynomial":
        return PiecewisePolynomial(self.breaks, np.asarray(coeffs, float).reshape(self.coeffs.shape))

    def to_dict(self) -> dict:
        return {"breaks": self.breaks.tolist(), "coeffs": self.coeffs.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "PiecewisePolynomial":
        return cls(np.asarray(d["breaks"], float), np.asarray(d["coeffs"], float))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> "PiecewisePolynomial":
        return cls.from_dict(json.loads(s))


def eval_poly(poly: PiecewisePolynomial, t, order: int = 0) -> Array:
    """
    Evaluate the ``order``-th time derivative.
    Returns shape (dims,) for scalar ``t`` and (len(t), dims) otherwise.
    """
    if order < 0:
        raise ValueError("derivative order must be nonnegative")
    scalar = np.ndim(t) == 0
    seg, tau = poly.locate(t)
    K = poly.n_coeffs
    fac = _deriv_factors(K, order)
    powers = np.clip(np.arange(K) - order, 0, None)
    rows = fac[None, :] * np.power(tau[:, None], powers[None, :])  # (T, K)
    c = poly.coeffs[:, seg, :]  # (dims, T, K)
    out = np.einsum("tk,dtk->td", rows, c)
    return out[0] if scalar else out


def basis_matrix(poly: PiecewisePolynomial, times, order: int = 0) -> Array:
    """
    Per-dimension linear map from stacked coefficients to samples.

    With ``B = basis_matrix(poly, times)``, ``B @ poly.coeffs[j].ravel()`` equals
    ``eval_poly(poly, times)[:, j]`` for every dimension j.
    """
    seg, tau = poly.locate(times)
    K = poly.n_coeffs
    B = np.zeros((len(tau), poly.n_segments * K))
    for i, (s, tt) in enumerate(zip(seg, tau)):
        B[i, s * K : (s + 1) * K] = monomial_row(tt, K, order)
    return B


def fit_interpolating_polynomial(wps: WaypointSet) -> PiecewisePolynomial:
    """Single global polynomial of degree W-1 through all W waypoints, no smoothness conditions."""
    W = len(wps.times)
    if W < 2:
        raise ValueError("need at least two waypoints")
    tau = wps.times - wps.times[0]
    V = np.vander(tau, W, increasing=True)
    cond = np.linalg.cond(V)
    if not np.isfinite(cond) or cond > MAX_VANDERMONDE_COND:
        raise ConditioningError(
            f"Vandermonde condition number {cond:.3g} exceeds {MAX_VANDERMONDE_COND:.0e}; rescale time"
        )
    coeffs = np.linalg.solve(V, wps.points)  # (W, dims)
    breaks = np.array([wps.times[0], wps.times[-1]])
    return PiecewisePolynomial(breaks, coeffs.T[:, None, :])


def _cost_hessian(h: float, n_coeffs: int, order: int) -> Array:
    """Hessian of int_0^h (d^order p / dtau^order)^2 dtau w.r.t. coefficients (without the factor 2)."""
    fac = _deriv_factors(n_coeffs, order)
    H = np.zeros((n_coeffs, n_coeffs))
    for j in range(order, n_coeffs):
        for k in range(order, n_coeffs):
            e = j + k - 2 * order + 1
            H[j, k] = fac[j] * fac[k] * h**e / e
    return H


def _fit_min_deriv_1d(
    breaks: Array, values: Array, n_coeffs: int, cost_order: int, n_continuous: int, n_boundary: int
) -> Array:
    n_seg = len(breaks) - 1
    n = n_seg * n_coeffs
    H = np.zeros((n, n))
    rows, rhs = [], []

    def row(seg: int, tau: float, d: int) -> Array:
        r = np.zeros(n)
        r[seg * n_coeffs : (seg + 1) * n_coeffs] = monomial_row(tau, n_coeffs, d)
        return r

    for i in range(n_seg):
        h = breaks[i + 1] - breaks[i]
        sl = slice(i * n_coeffs, (i + 1) * n_coeffs)
        H[sl, sl] = _cost_hessian(h, n_coeffs, cost_order)
        rows += [row(i, 0.0, 0), row(i, h, 0)]
        rhs += [values[i], values[i + 1]]
        if i < n_seg - 1:
            for d in range(1, n_continuous + 1):
                rows.append(row(i, h, d) - row(i + 1, 0.0, d))
                rhs.append(0.0)
    h_last = breaks[-1] - breaks[-2]
    for d in range(1, n_boundary + 1):
        rows += [row(0, 0.0, d), row(n_seg - 1, h_last, d)]
        rhs += [0.0, 0.0]

    A = np.array(rows)
    m = A.shape[0]
    kkt = np.zeros((n + m, n + m))
    kkt[:n, :n] = 2.0 * H
    kkt[:n, n:] = A.T
    kkt[n:, :n] = A
    b = np.concatenate([np.zeros(n), rhs])
    if m > n or np.linalg.matrix_rank(A) < m:
        raise InfeasibleSpecError("waypoint/continuity constraints are redundant or over-determined")
    try:
        sol = np.linalg.solve(kkt, b)
    except np.linalg.LinAlgError as exc:
        raise InfeasibleSpecError("singular KKT system in minimum-jerk fit") from exc
    if not np.all(np.isfinite(sol)) or np.linalg.cond(kkt) > 1e15:
        raise InfeasibleSpecError("singular KKT system in minimum-jerk fit")
    return sol[:n].reshape(n_seg, n_coeffs)


def fit_min_jerk(
    wps: WaypointSet, order: int = DEFAULT_ORDER, yaw_dims: Sequence[int] | None = None
) -> PiecewisePolynomial:
    """
    Piecewise polynomial (one segment per waypoint interval) minimizing the
    integrated squared jerk, or squared rate for yaw dimensions.

    Constraints: interpolation at every waypoint, continuity of derivatives 1-3
    at interior waypoints, and zero velocity and acceleration at both ends.

    :param order: polynomial degree of each segment (>= 5).
    :param yaw_dims: dimensions penalized by rate instead of jerk; defaults to
        the last dimension for 4-D (x, y, z, yaw) waypoints.
    """
    if len(wps.times) < 2:
        raise ValueError("need at least two waypoints")
    if order < 5:
        raise ValueError("minimum-jerk fit needs polynomial degree >= 5")
    if yaw_dims is None:
        yaw_dims = (3,) if wps.dims == 4 else ()
    n_coeffs = order + 1
    coeffs = np.empty((wps.dims, len(wps.times) - 1, n_coeffs))
    for j in range(wps.dims):
        cost_order = 1 if j in yaw_dims else 3
        coeffs[j] = _fit_min_deriv_1d(wps.times, wps.points[:, j], n_coeffs, cost_order, 3, 2)
    return PiecewisePolynomial(wps.times.copy(), coeffs)


def integrated_squared_derivative(poly: PiecewisePolynomial, order: int = 3) -> Array:
    """Exact per-dimension integral of (d^order p/dt^order)^2 over the support."""
    out = np.zeros(poly.dims)
    for i in range(poly.n_segments):
        H = _cost_hessian(poly.breaks[i + 1] - poly.breaks[i], poly.n_coeffs, order)
        for j in range(poly.dims):
            c = poly.coeffs[j, i]
            out[j] += c @ H @ c
    return out


def sample_lissajous(
    amps: Sequence[float], T: float = 3.0, n_waypoints: int = 5, steps_per_second: int = 100
) -> WaypointSet:
    """
    Equally spaced waypoints on the closed Lissajous loop

        x = Ax (1 - cos(2 pi n / N)),  (y, z, yaw) = (Ay, Az, Ayaw) sin(2 pi n / N)

    where n counts discrete steps and N = T * steps_per_second.
    """
    if T <= 0.0 or n_waypoints < 2:
        raise ValueError("need T > 0 and at least two waypoints")
    ax, ay, az, apsi = (float(a) for a in amps)
    N = int(round(T * steps_per_second))
    n = np.rint(np.linspace(0.0, N, n_waypoints)).astype(int)
    phase = 2.0 * np.pi * n / N
    # sin at multiples of pi is ~1e-16 in floating point; snap it so loops close exactly
    s = np.where((2 * n) % N == 0, 0.0, np.sin(phase))
    pts = np.stack([ax * (1.0 - np.cos(phase)), ay * s, az * s, apsi * s], axis=1)
    return WaypointSet(n / steps_per_second, pts)


def sample_on_grid(poly: PiecewisePolynomial, n_steps: int, dt: float, order: int = 0) -> Array:
    """Evaluate at t_k = t_start + k dt for k = 0..n_steps; returns (n_steps + 1, dims)."""
    t = poly.t_start + dt * np.arange(n_steps + 1)
    t[-1] = min(t[-1], poly.t_end)
    return eval_poly(poly, t, order)
