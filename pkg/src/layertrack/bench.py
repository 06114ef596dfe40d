"""
Closed-loop evaluation of planned references against baselines, and runtime benchmarks.

All costs here are realized: the reference is executed by the true closed loop
and scored with the tracking cost for the model's rho.
"""

from __future__ import annotations

import csv
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import partial
from pathlib import Path
from typing import Sequence

import numpy as np
import numpy.typing as npt

from layertrack.controllers import (
    Se3Gains,
    UnicyclePolicyGains,
    gains_hash,
    rollout_quadrotor,
    rollout_unicycle,
)
from layertrack.dataset import (
    QUADROTOR_HORIZON,
    UNICYCLE_HORIZON,
    hover_state,
    ilqr_reference,
    polynomial_reference,
    tracking_cost,
)
from layertrack.dynamics import QUADROTOR_DT, UNICYCLE_DT
from layertrack.errors import LayerTrackError
from layertrack.learner import MlpModel
from layertrack.planner import PlannerOptions, PlanSpec, plan_quadrotor, plan_unicycle
from layertrack.trajgen import PiecewisePolynomial, WaypointSet, fit_interpolating_polynomial, fit_min_jerk, sample_on_grid

Array = npt.NDArray[np.float64]

ROW_FIELDS = (
    "instance",
    "rho",
    "aware_cost",
    "baseline_cost",
    "relative_cost",
    "minjerk_cost",
    "plan_seconds",
    "iterations",
    "converged",
)
SUMMARY_FIELDS = ("rho", "n", "mean", "median", "q1", "q3", "min", "max", "mean_aware", "mean_baseline")
RUNTIME_FIELDS = ("method", "run", "seconds")


@dataclass
class BenchRow:
    instance: int
    rho: float
    aware_cost: float
    baseline_cost: float
    relative_cost: float
    plan_seconds: float
    iterations: int
    converged: bool
    minjerk_cost: float = float("nan")


@dataclass
class BenchReport:
    system: str
    rows: list[BenchRow] = field(default_factory=list)

    def summary(self) -> list[dict]:
        """Per-rho statistics of the relative cost, recomputed from the rows."""
        out = []
        for rho in sorted({row.rho for row in self.rows}):
            sel = [row for row in self.rows if row.rho == rho]
            rel = np.array([row.relative_cost for row in sel])
            q1, med, q3 = np.percentile(rel, [25, 50, 75])
            out.append(
                {
                    "rho": rho,
                    "n": len(sel),
                    "mean": float(rel.mean()),
                    "median": float(med),
                    "q1": float(q1),
                    "q3": float(q3),
                    "min": float(rel.min()),
                    "max": float(rel.max()),
                    "mean_aware": float(np.mean([row.aware_cost for row in sel])),
                    "mean_baseline": float(np.mean([row.baseline_cost for row in sel])),
                }
            )
        return out

    def write_csv(self, rows_path: str | Path, summary_path: str | Path | None = None) -> None:
        with open(rows_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=ROW_FIELDS)
            w.writeheader()
            for row in self.rows:
                w.writerow({k: _fmt(v) for k, v in asdict(row).items()})
        if summary_path is not None:
            with open(summary_path, "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS)
                w.writeheader()
                for s in self.summary():
                    w.writerow({k: _fmt(v) for k, v in s.items()})


def _fmt(v):
    # numpy scalars repr as "np.float64(...)"; write the plain round-trippable float
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def read_rows(path: str | Path) -> list[BenchRow]:
    rows = []
    with open(path, newline="") as fh:
        for d in csv.DictReader(fh):
            rows.append(
                BenchRow(
                    instance=int(d["instance"]),
                    rho=float(d["rho"]),
                    aware_cost=float(d["aware_cost"]),
                    baseline_cost=float(d["baseline_cost"]),
                    relative_cost=float(d["relative_cost"]),
                    plan_seconds=float(d["plan_seconds"]),
                    iterations=int(d["iterations"]),
                    converged=d["converged"] == "True",
                    minjerk_cost=float(d["minjerk_cost"]),
                )
            )
    return rows


def _map(fn, items, workers: int):
    """Ordered map; results come back in input order whatever the worker count."""
    if workers <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


# --------------------------------------------------------------------------- unicycle


def realized_cost_unicycle(x0: Array, r: Array, rho: float, dt: float = UNICYCLE_DT, gains=None) -> float:
    xs, us = rollout_unicycle(x0, r, dt, gains)
    return tracking_cost(xs, us, r, rho, system="unicycle")


def _unicycle_instance(item, model, gains, options, dt, horizon, weight):
    index, (x0, wps) = item
    try:
        baseline = polynomial_reference(wps, horizon, dt)
        res = plan_unicycle(PlanSpec(x0, wps, model, weight, options, horizon, dt, gains_hash(gains)))
        aware = realized_cost_unicycle(x0, res.reference, model.rho, dt, gains)
        base = realized_cost_unicycle(x0, baseline, model.rho, dt, gains)
    except LayerTrackError as exc:
        raise type(exc)(f"instance {index}: {exc}") from exc
    return BenchRow(index, model.rho, aware, base, aware / base, res.wall_time, res.iterations, res.converged)


def evaluate_unicycle(
    models: Sequence[MlpModel],
    instances: Sequence[tuple[Array, WaypointSet]],
    gains: UnicyclePolicyGains | None = None,
    options: PlannerOptions | None = None,
    dt: float = UNICYCLE_DT,
    horizon: int = UNICYCLE_HORIZON,
    waypoint_weight: float = 1.0,
    workers: int = 1,
) -> BenchReport:
    """Relative realized cost of dynamics-aware plans vs. interpolating polynomials, per model (rho)."""
    gains = gains or UnicyclePolicyGains()
    report = BenchReport("unicycle")
    for model in models:
        fn = partial(
            _unicycle_instance, model=model, gains=gains, options=options or PlannerOptions(), dt=dt, horizon=horizon, weight=waypoint_weight
        )
        report.rows.extend(_map(fn, list(enumerate(instances)), workers))
    return report


# --------------------------------------------------------------------------- quadrotor


def realized_cost_quadrotor(
    x0: Array, poly: PiecewisePolynomial, rho: float, dt: float = QUADROTOR_DT, horizon: int = QUADROTOR_HORIZON, gains=None
) -> float:
    xs, us = rollout_quadrotor(x0, poly, horizon, dt, gains)
    return tracking_cost(xs, us, sample_on_grid(poly, horizon, dt), rho, system="quadrotor")


def _quadrotor_instance(item, model, gains, options, dt, horizon, weight):
    index, wps = item
    x0 = hover_state(wps.points[0])
    try:
        res = plan_quadrotor(PlanSpec(x0, wps, model, weight, options, horizon, dt, gains_hash(gains)))
        aware = realized_cost_quadrotor(x0, res.poly, model.rho, dt, horizon, gains)
        base = realized_cost_quadrotor(x0, fit_interpolating_polynomial(wps), model.rho, dt, horizon, gains)
        mj = realized_cost_quadrotor(x0, fit_min_jerk(wps), model.rho, dt, horizon, gains)
    except LayerTrackError as exc:
        raise type(exc)(f"instance {index}: {exc}") from exc
    return BenchRow(index, model.rho, aware, base, aware / base, res.wall_time, res.iterations, res.converged, mj)


def evaluate_quadrotor(
    models: Sequence[MlpModel],
    missions: Sequence[WaypointSet],
    gains: Se3Gains | None = None,
    options: PlannerOptions | None = None,
    dt: float = QUADROTOR_DT,
    horizon: int = QUADROTOR_HORIZON,
    waypoint_weight: float = 1.0,
    workers: int = 1,
) -> BenchReport:
    """
    Realized cost of dynamics-aware plans vs. the no-smoothness interpolating
    baseline (``relative_cost``), with the minimum-jerk reference as a second column.
    Every mission starts from hover at its first waypoint.
    """
    gains = gains or Se3Gains()
    report = BenchReport("quadrotor")
    for model in models:
        fn = partial(_quadrotor_instance, model=model, gains=gains, options=options or PlannerOptions(), dt=dt, horizon=horizon, weight=waypoint_weight)
        report.rows.extend(_map(fn, list(enumerate(missions)), workers))
    return report


# --------------------------------------------------------------------------- runtime


@dataclass
class RuntimeReport:
    rows: list[tuple[str, int, float]] = field(default_factory=list)

    def times(self, method: str) -> Array:
        return np.array([s for m, _, s in self.rows if m == method])

    def stats(self, method: str) -> tuple[float, float]:
        t = self.times(method)
        return float(t.mean()), float(t.std())

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(RUNTIME_FIELDS)
            for m, i, s in self.rows:
                w.writerow([m, i, repr(float(s))])


def bench_runtime_unicycle(
    model: MlpModel,
    instances: Sequence[tuple[Array, WaypointSet]],
    gains: UnicyclePolicyGains | None = None,
    options: PlannerOptions | None = None,
    dt: float = UNICYCLE_DT,
    horizon: int = UNICYCLE_HORIZON,
) -> RuntimeReport:
    """Wall clock of planner inference vs. an iLQR solve on the same instances (sequential)."""
    gains = gains or UnicyclePolicyGains()
    report = RuntimeReport()
    for i, (x0, wps) in enumerate(instances):
        t0 = time.perf_counter()
        plan_unicycle(PlanSpec(x0, wps, model, 1.0, options or PlannerOptions(), horizon, dt))
        report.rows.append(("planner", i, time.perf_counter() - t0))
    for i, (x0, wps) in enumerate(instances):
        t0 = time.perf_counter()
        ilqr_reference(x0, wps, horizon, dt, gains)
        report.rows.append(("ilqr", i, time.perf_counter() - t0))
    return report
