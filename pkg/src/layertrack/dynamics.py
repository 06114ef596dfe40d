"""
Discrete-time plant models obtained by classical RK4 integration.

Unicycle:
    x = (x1, x2, theta), u = (v, omega)
    x1' = v cos(theta), x2' = v sin(theta), theta' = omega

Quadrotor (mass-normalized):
    x = (p, v, R), u = (c, omega)
    p' = v, v' = R e3 c + g, R' = R [omega x]

Quadrotor states travel as flat 15-vectors ``(p, v, vec(R))`` with ``R`` stored
row-major.  Inputs are held constant over a step (zero-order hold).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import numpy.typing as npt

from layertrack import GRAVITY
from layertrack.errors import IntegrationError

Array = npt.NDArray[np.float64]

UNICYCLE_DT = 0.05
QUADROTOR_DT = 0.01

E3 = np.array([0.0, 0.0, 1.0])
GRAVITY_VEC = np.array([0.0, 0.0, -GRAVITY])


@dataclass(frozen=True)
class UnicycleState:
    x1: float  # [m]
    x2: float  # [m]
    theta: float  # [rad], stored unwrapped

    def as_array(self) -> Array:
        return np.array([self.x1, self.x2, self.theta], dtype=float)

    @classmethod
    def from_array(cls, x: Array) -> "UnicycleState":
        x = np.asarray(x, dtype=float)
        if x.shape != (3,) or not np.all(np.isfinite(x)):
            raise ValueError(f"unicycle state must be 3 finite numbers, got {x!r}")
        return cls(float(x[0]), float(x[1]), float(x[2]))


@dataclass(frozen=True)
class QuadrotorState:
    p: Array  # [m]
    v: Array  # [m/s]
    R: Array  # body-to-world rotation

    def as_array(self) -> Array:
        return pack_quadrotor(self.p, self.v, self.R)

    @classmethod
    def from_array(cls, x: Array) -> "QuadrotorState":
        p, v, R = unpack_quadrotor(x)
        return cls(p.copy(), v.copy(), R.copy())

    @classmethod
    def hover(cls, p: Array | None = None, yaw: float = 0.0) -> "QuadrotorState":
        p = np.zeros(3) if p is None else np.asarray(p, dtype=float)
        return cls(p, np.zeros(3), rot_z(yaw))


@dataclass(frozen=True)
class AugmentedState:
    """Plant state together with the reference window r_{t:t+N}."""

    x: Array
    r_window: Array  # shape (N + 1, n_r)

    def __post_init__(self) -> None:
        assert self.r_window.ndim == 2, "reference window must be (N + 1, n_r)"
        assert np.all(np.isfinite(self.r_window)), "reference window has non-finite entries"


def pack_quadrotor(p: Array, v: Array, R: Array) -> Array:
    return np.concatenate([np.asarray(p, float), np.asarray(v, float), np.asarray(R, float).reshape(9)])


def unpack_quadrotor(x: Array) -> tuple[Array, Array, Array]:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != 15:
        raise ValueError(f"quadrotor state must have 15 entries, got shape {x.shape}")
    return x[..., 0:3], x[..., 3:6], x[..., 6:15].reshape(x.shape[:-1] + (3, 3))


def wrap_angle(a):
    """Map angles to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)


def hat(w: Array) -> Array:
    """Skew-symmetric matrix with hat(w) @ a == cross(w, a)."""
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def vee(S: Array) -> Array:
    return np.array([S[2, 1], S[0, 2], S[1, 0]])


def rot_z(yaw: float) -> Array:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def so3_exp(w: Array) -> Array:
    """Rodrigues formula for exp(hat(w))."""
    theta = float(np.linalg.norm(w))
    K = hat(w)
    if theta < 1e-8:
        # second-order series is exact to roundoff at this size
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + (np.sin(theta) / theta) * K + ((1.0 - np.cos(theta)) / theta**2) * (K @ K)


def project_so3(R: Array) -> Array:
    """Nearest rotation in Frobenius norm (polar factor via SVD)."""
    if not np.all(np.isfinite(R)):
        raise IntegrationError("rotation matrix has non-finite entries")
    U, s, Vt = np.linalg.svd(R)
    if s[-1] < 1e-6:
        raise IntegrationError(f"rotation matrix is degenerate (smallest singular value {s[-1]:.3g})")
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def yaw_of(R: Array) -> float:
    return float(np.arctan2(R[1, 0], R[0, 0]))


def rk4_step(deriv: Callable[[Array, Array], Array], x: Array, u: Array, dt: float) -> Array:
    """
    One classical Runge-Kutta step with ``u`` held constant.
    :param deriv: vector field f(x, u); may be vectorized over leading axes.
    :raises IntegrationError: if a stage evaluates to a non-finite value.
    """
    if not dt > 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    x = np.asarray(x, dtype=float)
    stages = []
    for i, (scale, base) in enumerate(((0.0, None), (0.5, 0), (0.5, 1), (1.0, 2))):
        xi = x if base is None else x + scale * dt * stages[base]
        k = np.asarray(deriv(xi, u), dtype=float)
        if not np.all(np.isfinite(k)):
            raise IntegrationError(f"non-finite derivative at RK4 stage {i + 1}", stage=i + 1)
        stages.append(k)
    k1, k2, k3, k4 = stages
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def unicycle_deriv(x: Array, u: Array) -> Array:
    """Vector field of the unicycle; broadcasts over leading axes."""
    theta = x[..., 2]
    v, w = u[..., 0], u[..., 1]
    return np.stack([v * np.cos(theta), v * np.sin(theta), np.broadcast_to(w, theta.shape)], axis=-1)


def unicycle_step(x: Array, u: Array, dt: float = UNICYCLE_DT) -> Array:
    return rk4_step(unicycle_deriv, x, np.asarray(u, dtype=float), dt)


def quadrotor_step(x: Array, u: Array, dt: float = QUADROTOR_DT) -> Array:
    """
    Advance the quadrotor one step.

    The body rate is constant over the step, so the attitude is propagated
    exactly with the exponential map; position and velocity go through RK4 with
    the rotation evaluated at each stage time.  R is re-projected onto SO(3)
    afterwards to remove roundoff drift.
    """
    p, v, R0 = unpack_quadrotor(x)
    u = np.asarray(u, dtype=float)
    c, omega = float(u[0]), u[1:4]
    if not (np.isfinite(c) and np.all(np.isfinite(omega))):
        raise IntegrationError("non-finite quadrotor input")

    # local clock s rides along as the last coordinate so RK4 sees R(s)
    def deriv(z: Array, _u: Array) -> Array:
        R = R0 @ so3_exp(z[6] * omega)
        acc = R @ E3 * c + GRAVITY_VEC
        return np.concatenate([z[3:6], acc, [1.0]])

    z = rk4_step(deriv, np.concatenate([p, v, [0.0]]), u, dt)
    R1 = project_so3(R0 @ so3_exp(dt * omega))
    return pack_quadrotor(z[0:3], z[3:6], R1)


def block_upshift(r_window: Array, zero_fill: bool = False) -> Array:
    """
    Shift a stacked reference window forward by one slot.
    The vacated final slot repeats the last point unless ``zero_fill`` is set.
    """
    r_window = np.asarray(r_window, dtype=float)
    out = np.empty_like(r_window)
    out[:-1] = r_window[1:]
    out[-1] = 0.0 if zero_fill else r_window[-1]
    return out


def augmented_step(
    mu: AugmentedState,
    u: Array,
    dt: float,
    plant: Callable[[Array, Array, float], Array],
    zero_fill: bool = False,
) -> AugmentedState:
    return AugmentedState(plant(mu.x, u, dt), block_upshift(mu.r_window, zero_fill=zero_fill))


PLANTS: dict[str, Callable[[Array, Array, float], Array]] = {
    "unicycle": unicycle_step,
    "quadrotor": quadrotor_step,
}
