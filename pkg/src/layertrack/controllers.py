"""
Low-layer tracking policies and closed-loop rollouts.

The unicycle policy is u = g(x)^T (r' + Kp (x - r)); the columns of g(x) are
orthonormal so the pseudo-inverse is the transpose.  The quadrotor uses an
SE(3) geometric controller commanding mass-normalized thrust and body rates.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import numpy.typing as npt

from layertrack import GRAVITY
from layertrack.dynamics import (
    E3,
    QUADROTOR_DT,
    UNICYCLE_DT,
    quadrotor_step,
    rk4_step,
    unicycle_step,
    unpack_quadrotor,
    vee,
    wrap_angle,
)
from layertrack.errors import AttitudeConstructionError, ControllerError, DegenerateThrustError, IntegrationError
from layertrack.trajgen import PiecewisePolynomial, eval_poly

Array = npt.NDArray[np.float64]

EPS_THRUST = 1e-6
EPS_ATTITUDE = 1e-6


@dataclass(frozen=True)
class UnicyclePolicyGains:
    Kp: Array = field(default_factory=lambda: -2.0 * np.eye(3))  # [1/s]

    def __post_init__(self) -> None:
        Kp = np.asarray(self.Kp, dtype=float)
        assert Kp.shape == (3, 3), "Kp must be 3x3"
        assert np.all(np.linalg.eigvalsh(Kp + Kp.T) < 0.0), "Kp + Kp^T must be negative definite"
        object.__setattr__(self, "Kp", Kp)

    def to_dict(self) -> dict:
        return {"Kp": self.Kp.tolist()}


@dataclass(frozen=True)
class Se3Gains:
    kp: tuple[float, float, float] = (6.0, 6.0, 8.0)
    kv: tuple[float, float, float] = (4.0, 4.0, 5.0)
    kR: float = 6.0
    jerk_feedforward: bool = False

    def __post_init__(self) -> None:
        assert all(k > 0 for k in self.kp) and len(self.kp) == 3, "kp must be three positive gains"
        assert all(k > 0 for k in self.kv) and len(self.kv) == 3, "kv must be three positive gains"
        assert self.kR > 0, "kR must be positive"

    def to_dict(self) -> dict:
        return asdict(self)


def gains_hash(gains: UnicyclePolicyGains | Se3Gains) -> str:
    """Stable fingerprint of a controller configuration."""
    payload = {"type": type(gains).__name__, **{k: np.asarray(v).tolist() for k, v in gains.to_dict().items()}}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class FlatCommand:
    position: Array
    velocity: Array
    acceleration: Array
    jerk: Array
    yaw: float
    yaw_rate: float

    def as_array(self) -> Array:
        """The 14-number command vector."""
        return np.concatenate(
            [self.position, self.velocity, self.acceleration, self.jerk, [self.yaw, self.yaw_rate]]
        )


def input_matrix(theta):
    """g(x) of the unicycle, shape (..., 3, 2)."""
    theta = np.asarray(theta, dtype=float)
    g = np.zeros(theta.shape + (3, 2))
    g[..., 0, 0] = np.cos(theta)
    g[..., 1, 0] = np.sin(theta)
    g[..., 2, 1] = 1.0
    return g


def tracking_error_unicycle(x: Array, r: Array) -> Array:
    """x - r with the heading component wrapped to (-pi, pi]."""
    e = np.asarray(x, dtype=float) - np.asarray(r, dtype=float)
    e[..., 2] = wrap_angle(e[..., 2])
    return e


def unicycle_policy(x: Array, r: Array, r_dot: Array, gains: UnicyclePolicyGains | None = None) -> Array:
    """u = g(x)^T (r_dot + Kp (x - r)); broadcasts over leading axes."""
    Kp = (gains or UnicyclePolicyGains()).Kp
    x = np.asarray(x, dtype=float)
    e = tracking_error_unicycle(x, r)
    desired = np.asarray(r_dot, dtype=float) + e @ Kp.T
    g = input_matrix(x[..., 2])
    return np.einsum("...ij,...i->...j", g, desired)


def unicycle_closed_loop_deriv(xbar: Array, dr: Array, gains: UnicyclePolicyGains | None = None) -> Array:
    """
    Continuous closed-loop field over xbar = (x, r) with input dr = r'.
    Vectorized over leading axes.
    """
    x, r = xbar[..., :3], xbar[..., 3:]
    dr = np.broadcast_to(dr, r.shape)
    u = unicycle_policy(x, r, dr, gains)
    theta = x[..., 2]
    xdot = np.stack([u[..., 0] * np.cos(theta), u[..., 0] * np.sin(theta), u[..., 1]], axis=-1)
    return np.concatenate([xdot, dr], axis=-1)


def unicycle_closed_loop_step(
    xbar: Array, dr: Array, dt: float = UNICYCLE_DT, gains: UnicyclePolicyGains | None = None
) -> Array:
    return rk4_step(lambda z, v: unicycle_closed_loop_deriv(z, v, gains), xbar, dr, dt)


def flat_to_command(poly: PiecewisePolynomial, t: float) -> FlatCommand:
    """Position derivatives 0-3 and yaw derivatives 0-1 of a (x, y, z, yaw) polynomial."""
    d = [eval_poly(poly, t, k) for k in range(4)]
    return FlatCommand(d[0][:3], d[1][:3], d[2][:3], d[3][:3], float(d[0][3]), float(d[1][3]))


def commands_on_grid(poly: PiecewisePolynomial, n_steps: int, dt: float = QUADROTOR_DT) -> Array:
    """14-number commands at t_k = t_start + k dt, k = 0..n_steps; shape (n_steps + 1, 14)."""
    t = poly.t_start + dt * np.arange(n_steps + 1)
    t = np.minimum(t, poly.t_end)
    d = [eval_poly(poly, t, k) for k in range(4)]
    return np.concatenate([d[0][:, :3], d[1][:, :3], d[2][:, :3], d[3][:, :3], d[0][:, 3:4], d[1][:, 3:4]], axis=1)


def _desired_attitude(F: Array, yaw: float) -> Array:
    b3 = F / np.linalg.norm(F)
    b1c = np.array([np.cos(yaw), np.sin(yaw), 0.0])
    b2 = np.cross(b3, b1c)
    n2 = np.linalg.norm(b2)
    if n2 < EPS_ATTITUDE:
        raise AttitudeConstructionError("desired thrust axis is parallel to the yaw heading")
    b2 /= n2
    b1 = np.cross(b2, b3)
    return np.column_stack([b1, b2, b3])


def se3_policy(x: Array, cmd: FlatCommand | Array, gains: Se3Gains | None = None) -> Array:
    """
    Geometric tracking controller returning (c, omega).
    :param x: 15-vector quadrotor state.
    :param cmd: FlatCommand or its 14-number array form.
    :raises DegenerateThrustError: desired force below EPS_THRUST (free-fall command).
    """
    gains = gains or Se3Gains()
    if isinstance(cmd, FlatCommand):
        cmd = cmd.as_array()
    p, v, R = unpack_quadrotor(x)
    p_c, v_c, a_c, j_c = cmd[0:3], cmd[3:6], cmd[6:9], cmd[9:12]
    yaw, yaw_rate = cmd[12], cmd[13]

    e_p = p - p_c
    e_v = v - v_c
    F = -np.asarray(gains.kp) * e_p - np.asarray(gains.kv) * e_v + np.array([0.0, 0.0, GRAVITY]) + a_c
    F_norm = np.linalg.norm(F)
    if not F_norm > EPS_THRUST:
        raise DegenerateThrustError(f"desired thrust norm {F_norm:.3g} is below {EPS_THRUST}")
    c = float(F @ (R @ E3))

    R_des = _desired_attitude(F, yaw)
    e_R = 0.5 * vee(R_des.T @ R - R.T @ R_des)
    RtRd = R.T @ R_des
    omega = -gains.kR * e_R + yaw_rate * (RtRd @ E3)
    if gains.jerk_feedforward:
        # body-rate feedforward from the jerk component orthogonal to the thrust axis
        b3 = R_des[:, 2]
        h = (j_c - (b3 @ j_c) * b3) / F_norm
        omega = omega + RtRd @ np.array([-h @ R_des[:, 1], h @ R_des[:, 0], 0.0])
    return np.concatenate([[c], omega])


def forward_difference(r: Array, dt: float) -> Array:
    """(r_{t+1} - r_t)/dt with a backward difference at the final sample."""
    rd = np.empty_like(r)
    rd[:-1] = (r[1:] - r[:-1]) / dt
    rd[-1] = rd[-2] if len(r) > 1 else 0.0
    return rd


def rollout_unicycle(
    x0: Array, r: Array, dt: float = UNICYCLE_DT, gains: UnicyclePolicyGains | None = None
) -> tuple[Array, Array]:
    """
    Roll the unicycle policy along a sampled reference r_{0:N}.
    :return: states (N + 1, 3) and inputs (N, 2).
    """
    r = np.asarray(r, dtype=float)
    N = len(r) - 1
    rd = forward_difference(r, dt)
    xs = np.empty((N + 1, 3))
    us = np.empty((N, 2))
    xs[0] = x0
    for t in range(N):
        us[t] = unicycle_policy(xs[t], r[t], rd[t], gains)
        try:
            xs[t + 1] = unicycle_step(xs[t], us[t], dt)
        except IntegrationError as exc:
            exc.step = t
            raise
    return xs, us


def rollout_quadrotor(
    x0: Array,
    reference: PiecewisePolynomial | Array,
    n_steps: int | None = None,
    dt: float = QUADROTOR_DT,
    gains: Se3Gains | None = None,
) -> tuple[Array, Array]:
    """
    Roll the SE(3) controller along a flat-output reference.
    :param reference: polynomial in (x, y, z, yaw), or precomputed (N + 1, 14) commands.
    :return: states (N + 1, 15) and inputs (N, 4).
    """
    if isinstance(reference, PiecewisePolynomial):
        if n_steps is None:
            n_steps = int(round((reference.t_end - reference.t_start) / dt))
        cmds = commands_on_grid(reference, n_steps, dt)
    else:
        cmds = np.asarray(reference, dtype=float)
        n_steps = len(cmds) - 1 if n_steps is None else n_steps
    xs = np.empty((n_steps + 1, 15))
    us = np.empty((n_steps, 4))
    xs[0] = x0
    for t in range(n_steps):
        try:
            us[t] = se3_policy(xs[t], cmds[t], gains)
            xs[t + 1] = quadrotor_step(xs[t], us[t], dt)
        except (ControllerError, IntegrationError) as exc:
            exc.step = t
            raise
    return xs, us


def rollout(system: str, x0: Array, reference, dt: float | None = None, gains=None, n_steps: int | None = None):
    """Dispatch to the plant-specific rollout."""
    if system == "unicycle":
        return rollout_unicycle(x0, reference, dt or UNICYCLE_DT, gains)
    if system == "quadrotor":
        return rollout_quadrotor(x0, reference, n_steps, dt or QUADROTOR_DT, gains)
    raise ValueError(f"unknown system {system!r}")
