"""
Monte-Carlo rollouts of the fixed tracking controllers and their cost labels.

Rollouts are stored without reference to the tracking weight rho; labels are
computed per rho when a training set is built.  Each record draws from its own
random stream seeded by (master seed, generator kind, record index), so the
dataset does not depend on generation order.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import numpy.typing as npt

from layertrack import GRAVITY
from layertrack.controllers import (
    Se3Gains,
    UnicyclePolicyGains,
    gains_hash,
    rollout_quadrotor,
    rollout_unicycle,
)
from layertrack.dynamics import QUADROTOR_DT, UNICYCLE_DT, pack_quadrotor, rot_z, unpack_quadrotor, wrap_angle
from layertrack.errors import ControllerError, DatasetFormatError, IntegrationError, SolverFailure
from layertrack.ilqr import solve_ilqr, straight_line_init, unicycle_reference_problem
from layertrack.trajgen import (
    WaypointSet,
    fit_interpolating_polynomial,
    fit_min_jerk,
    sample_lissajous,
    sample_on_grid,
)

Array = npt.NDArray[np.float64]

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
DEFAULT_INPUT_WEIGHT = 0.1  # ||D u||^2 = 0.1 ||u||^2
UNICYCLE_HORIZON = 100
QUADROTOR_HORIZON = 300
LISSAJOUS_AMPLITUDE_BOUNDS = (0.65, 0.55, 0.55, 0.6 * np.pi)
LISSAJOUS_PERIOD = 3.0
LISSAJOUS_WAYPOINTS = 5
ILQR_RETRIES = 3

# stream ids keep generator kinds on disjoint random streams
_STREAM = {"ilqr": 0, "polynomial": 1, "unicycle-test": 2, "lissajous": 3, "lissajous-test": 4}


def record_rng(seed: int, kind: str, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), _STREAM[kind], int(index)])


# --------------------------------------------------------------------------- costs


def tracking_errors(system: str, x: Array, r: Array) -> Array:
    """
    Per-step tracking error.  Unicycle: x - r with wrapped heading.
    Quadrotor: (p - r_pos, wrapped yaw(R) - r_yaw) against a flat (x, y, z, yaw) reference.
    """
    x = np.asarray(x, dtype=float)
    r = np.asarray(r, dtype=float)
    if system == "unicycle":
        e = x - r
        e[..., 2] = wrap_angle(e[..., 2])
        return e
    if system == "quadrotor":
        p, _, R = unpack_quadrotor(x)
        yaw = np.arctan2(R[..., 1, 0], R[..., 0, 0])
        return np.concatenate([p - r[..., :3], wrap_angle(yaw - r[..., 3])[..., None]], axis=-1)
    raise ValueError(f"unknown system {system!r}")


def input_deviation(system: str, u: Array) -> Array:
    """Control effort measured from the zero-effort input (hover thrust for the quadrotor)."""
    u = np.asarray(u, dtype=float)
    if system == "quadrotor":
        u = u.copy()
        u[..., 0] -= GRAVITY
    return u


def tracking_cost(
    x: Array,
    u: Array,
    r: Array,
    rho: float,
    D: float | Array | None = None,
    system: str = "unicycle",
) -> float:
    """
    sum_{t<N} (rho ||x_t - r_t||^2 + ||D_t u_t||^2) + rho ||x_N - r_N||^2.

    :param D: scalar (D = D * I), a (k, k) matrix, or per-step (N, k, k) matrices;
        defaults to sqrt(0.1) I.
    """
    if not rho > 0.0:
        raise ValueError("rho must be positive")
    e = tracking_errors(system, x, r)
    du = input_deviation(system, u)
    if len(e) != len(du) + 1:
        raise ValueError("expected N + 1 states/references and N inputs")
    if D is None:
        effort = DEFAULT_INPUT_WEIGHT * float(np.sum(du * du))
    elif np.ndim(D) == 0:
        effort = float(D) ** 2 * float(np.sum(du * du))
    else:
        D = np.asarray(D, dtype=float)
        Du = np.einsum("ij,tj->ti", D, du) if D.ndim == 2 else np.einsum("tij,tj->ti", D, du)
        effort = float(np.sum(Du * Du))
    return rho * float(np.sum(e * e)) + effort


# --------------------------------------------------------------------------- records


@dataclass
class RolloutRecord:
    system: str
    kind: str
    seed: int
    dt: float
    x: Array  # (N + 1, n_x)
    u: Array  # (N, k)
    r: Array  # (N + 1, n_r)
    gains_hash: str
    index: int = 0
    waypoints: WaypointSet | None = None

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=float)
        self.u = np.asarray(self.u, dtype=float)
        self.r = np.asarray(self.r, dtype=float)
        if not (len(self.x) == len(self.r) == len(self.u) + 1):
            raise DatasetFormatError("record lengths inconsistent with horizon N")

    @property
    def horizon(self) -> int:
        return len(self.u)

    def cost(self, rho: float, D: float | Array | None = None) -> float:
        return tracking_cost(self.x, self.u, self.r, rho, D, self.system)

    def to_json(self) -> str:
        d = {
            "version": FORMAT_VERSION,
            "system": self.system,
            "kind": self.kind,
            "seed": int(self.seed),
            "index": int(self.index),
            "dt": self.dt,
            "x": self.x.tolist(),
            "u": self.u.tolist(),
            "r": self.r.tolist(),
            "gains_hash": self.gains_hash,
        }
        if self.waypoints is not None:
            d["waypoints"] = self.waypoints.to_dict()
        return json.dumps(d)

    @classmethod
    def from_json(cls, line: str) -> "RolloutRecord":
        try:
            d = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"malformed record: {exc}") from exc
        if d.get("version") != FORMAT_VERSION:
            raise DatasetFormatError(f"unsupported dataset version {d.get('version')!r}")
        try:
            wps = WaypointSet.from_dict(d["waypoints"]) if "waypoints" in d else None
            return cls(
                system=d["system"],
                kind=d["kind"],
                seed=int(d["seed"]),
                dt=float(d["dt"]),
                x=np.asarray(d["x"], float),
                u=np.asarray(d["u"], float).reshape(len(d["u"]), -1),
                r=np.asarray(d["r"], float),
                gains_hash=d["gains_hash"],
                index=int(d.get("index", 0)),
                waypoints=wps,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(f"malformed record: {exc}") from exc


@dataclass
class DatasetMeta:
    system: str
    seed: int
    gains_hash: str
    counts: dict[str, int] = field(default_factory=dict)
    skipped: dict[str, int] = field(default_factory=dict)
    retries: int = 0


def save_dataset(records: Iterable[RolloutRecord], path: str | Path) -> str:
    """Write JSON Lines; returns the sha256 of the written bytes."""
    text = "".join(rec.to_json() + "\n" for rec in records)
    Path(path).write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def load_dataset(path: str | Path) -> list[RolloutRecord]:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(RolloutRecord.from_json(line))
            except DatasetFormatError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: {exc}") from exc
    return records


def dataset_hash(records: Iterable[RolloutRecord]) -> str:
    h = hashlib.sha256()
    for rec in records:
        h.update(rec.to_json().encode())
        h.update(b"\n")
    return h.hexdigest()


# --------------------------------------------------------------------------- network inputs


def quadrotor_flat_state(x: Array, omega: Array | None = None) -> Array:
    """(p, yaw, v, yaw_rate) of a quadrotor state; yaw rate from the body rate if given."""
    p, v, R = unpack_quadrotor(x)
    yaw = float(np.arctan2(R[1, 0], R[0, 0]))
    yaw_rate = 0.0
    if omega is not None:
        Rdot = R @ np.array([[0.0, -omega[2], omega[1]], [omega[2], 0.0, -omega[0]], [-omega[1], omega[0], 0.0]])
        yaw_rate = float((R[0, 0] * Rdot[1, 0] - R[1, 0] * Rdot[0, 0]) / (R[0, 0] ** 2 + R[1, 0] ** 2))
    return np.concatenate([p, [yaw], v, [yaw_rate]])


def network_input(system: str, x0: Array, r: Array, omega0: Array | None = None) -> Array:
    """
    Flattened (initial condition, reference) pair fed to the penalty network.
    The quadrotor initial condition is reduced to flat outputs and their rates (8 numbers).
    """
    r = np.asarray(r, dtype=float).ravel()
    if system == "unicycle":
        head = np.asarray(x0, dtype=float)
    elif system == "quadrotor":
        head = quadrotor_flat_state(x0, omega0)
    else:
        raise ValueError(f"unknown system {system!r}")
    return np.concatenate([head, r])


def head_size(system: str) -> int:
    return 3 if system == "unicycle" else 8


@dataclass(frozen=True)
class TrainingSample:
    mu: Array
    y: float


def label_dataset(records: Sequence[RolloutRecord], rho: float, D: float | Array | None = None) -> list[TrainingSample]:
    if not rho > 0.0:
        raise ValueError("rho must be positive")
    return [TrainingSample(network_input(rec.system, rec.x[0], rec.r), rec.cost(rho, D)) for rec in records]


def stack_samples(samples: Sequence[TrainingSample]) -> tuple[Array, Array]:
    return np.stack([s.mu for s in samples]), np.array([s.y for s in samples])


# --------------------------------------------------------------------------- unicycle generation


def sample_unicycle_waypoints(
    rng: np.random.Generator, horizon: int = UNICYCLE_HORIZON, dt: float = UNICYCLE_DT, n_intermediate: int = 1
) -> tuple[Array, WaypointSet]:
    """
    Start in [0, 2]^2 with heading in [0, pi], goal in [1, 3]^2 with heading 0, and
    intermediate waypoints at convex combinations (heading mixed the same way),
    placed in time proportionally to the mixing coefficient.
    """
    p0 = rng.uniform(0.0, 2.0, size=2)
    goal = rng.uniform(1.0, 3.0, size=2)
    th0 = rng.uniform(0.0, np.pi)
    while True:
        lams = np.sort(rng.uniform(0.0, 1.0, size=n_intermediate))
        steps = np.clip(np.rint(lams * horizon).astype(int), 1, horizon - 1)
        if len(np.unique(steps)) == n_intermediate:
            break
    x0 = np.array([p0[0], p0[1], th0])
    pts = [x0]
    for lam in lams:
        pts.append(np.concatenate([(1.0 - lam) * p0 + lam * goal, [(1.0 - lam) * th0]]))
    pts.append(np.array([goal[0], goal[1], 0.0]))
    times = np.concatenate([[0], steps, [horizon]]) * dt
    return x0, WaypointSet(times, np.array(pts))


def polynomial_reference(wps: WaypointSet, horizon: int, dt: float) -> Array:
    return sample_on_grid(fit_interpolating_polynomial(wps), horizon, dt)


def ilqr_reference(
    x0: Array,
    wps: WaypointSet,
    horizon: int = UNICYCLE_HORIZON,
    dt: float = UNICYCLE_DT,
    gains: UnicyclePolicyGains | None = None,
    input_weight: float = 0.1,
    waypoint_weight: float = 1.0,
):
    problem = unicycle_reference_problem(x0, wps, horizon, dt, gains, input_weight, waypoint_weight)
    sol = solve_ilqr(problem, straight_line_init(x0, wps.points[-1], horizon, dt))
    return sol.states[:, 3:], sol


def generate_unicycle_dataset(
    seed: int,
    n_ilqr: int = 500,
    n_poly: int = 500,
    horizon: int = UNICYCLE_HORIZON,
    dt: float = UNICYCLE_DT,
    gains: UnicyclePolicyGains | None = None,
    ilqr_input_weight: float = 0.1,
    waypoint_weight: float = 1.0,
) -> tuple[list[RolloutRecord], DatasetMeta]:
    """iLQR ("easy to track") and interpolating-polynomial ("hard to track") references with their rollouts."""
    gains = gains or UnicyclePolicyGains()
    ghash = gains_hash(gains)
    meta = DatasetMeta("unicycle", seed, ghash, counts={"ilqr": 0, "polynomial": 0}, skipped={"ilqr": 0})
    records: list[RolloutRecord] = []

    for i in range(n_ilqr):
        rng = record_rng(seed, "ilqr", i)
        for attempt in range(ILQR_RETRIES + 1):
            x0, wps = sample_unicycle_waypoints(rng, horizon, dt)
            try:
                r, sol = ilqr_reference(x0, wps, horizon, dt, gains, ilqr_input_weight, waypoint_weight)
            except SolverFailure as exc:
                logger.warning("iLQR record %d attempt %d failed: %s", i, attempt, exc)
                meta.retries += 1
                continue
            if sol.terminal_violation >= 1e-3:
                logger.warning("iLQR record %d attempt %d: terminal violation %.2e", i, attempt, sol.terminal_violation)
                meta.retries += 1
                continue
            xs, us = rollout_unicycle(x0, r, dt, gains)
            records.append(RolloutRecord("unicycle", "ilqr", seed, dt, xs, us, r, ghash, i, wps))
            meta.counts["ilqr"] += 1
            break
        else:
            meta.skipped["ilqr"] += 1

    for i in range(n_poly):
        rng = record_rng(seed, "polynomial", i)
        x0, wps = sample_unicycle_waypoints(rng, horizon, dt)
        r = polynomial_reference(wps, horizon, dt)
        xs, us = rollout_unicycle(x0, r, dt, gains)
        records.append(RolloutRecord("unicycle", "polynomial", seed, dt, xs, us, r, ghash, i, wps))
        meta.counts["polynomial"] += 1
    return records, meta


def unicycle_test_instances(
    seed: int, n: int = 50, horizon: int = UNICYCLE_HORIZON, dt: float = UNICYCLE_DT
) -> list[tuple[Array, WaypointSet]]:
    """Evaluation instances with one or two intermediate waypoints each."""
    out = []
    for i in range(n):
        rng = record_rng(seed, "unicycle-test", i)
        k = int(rng.integers(1, 3))
        out.append(sample_unicycle_waypoints(rng, horizon, dt, n_intermediate=k))
    return out


# --------------------------------------------------------------------------- quadrotor generation


def sample_lissajous_amplitudes(rng: np.random.Generator) -> Array:
    b = np.asarray(LISSAJOUS_AMPLITUDE_BOUNDS)
    return rng.uniform(-b, b)


def lissajous_mission(amps: Array, dt: float = QUADROTOR_DT) -> WaypointSet:
    return sample_lissajous(amps, LISSAJOUS_PERIOD, LISSAJOUS_WAYPOINTS, int(round(1.0 / dt)))


def hover_state(waypoint: Array) -> Array:
    """Hover at a (x, y, z, yaw) waypoint."""
    return pack_quadrotor(waypoint[:3], np.zeros(3), rot_z(float(waypoint[3])))


def generate_quadrotor_dataset(
    seed: int,
    n_missions: int = 125,
    horizon: int = QUADROTOR_HORIZON,
    dt: float = QUADROTOR_DT,
    gains: Se3Gains | None = None,
) -> tuple[list[RolloutRecord], DatasetMeta]:
    """Minimum-jerk references through Lissajous waypoints, tracked from hover by the SE(3) controller."""
    gains = gains or Se3Gains()
    ghash = gains_hash(gains)
    meta = DatasetMeta("quadrotor", seed, ghash, counts={"lissajous": 0}, skipped={"lissajous": 0})
    records: list[RolloutRecord] = []
    for i in range(n_missions):
        rng = record_rng(seed, "lissajous", i)
        wps = lissajous_mission(sample_lissajous_amplitudes(rng), dt)
        poly = fit_min_jerk(wps)
        x0 = hover_state(wps.points[0])
        try:
            xs, us = rollout_quadrotor(x0, poly, horizon, dt, gains)
        except (ControllerError, IntegrationError) as exc:
            logger.warning("quadrotor record %d skipped: %s", i, exc)
            meta.skipped["lissajous"] += 1
            continue
        r = sample_on_grid(poly, horizon, dt)
        records.append(RolloutRecord("quadrotor", "lissajous", seed, dt, xs, us, r, ghash, i, wps))
        meta.counts["lissajous"] += 1
    return records, meta


def quadrotor_test_missions(seed: int, n: int = 15, dt: float = QUADROTOR_DT) -> list[WaypointSet]:
    return [lissajous_mission(sample_lissajous_amplitudes(record_rng(seed, "lissajous-test", i)), dt) for i in range(n)]


def quadrotor_replan_mission(seed: int, n_windows: int = 3, dt: float = QUADROTOR_DT) -> list[WaypointSet]:
    """Consecutive Lissajous windows, each starting at the previous window's last waypoint."""
    out: list[WaypointSet] = []
    offset = np.zeros(4)
    for wps in quadrotor_test_missions(seed, n_windows, dt):
        out.append(WaypointSet(wps.times, wps.points + offset))
        offset = out[-1].points[-1]
    return out
