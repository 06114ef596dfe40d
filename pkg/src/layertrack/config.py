"""
Experiment configuration: one JSON file per run, validated on load.

Unknown keys are rejected so a typo cannot silently fall back to a default.
Every command writes the fully resolved configuration next to its outputs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

from layertrack.controllers import Se3Gains, UnicyclePolicyGains
from layertrack.dataset import QUADROTOR_HORIZON, UNICYCLE_HORIZON
from layertrack.dynamics import QUADROTOR_DT, UNICYCLE_DT
from layertrack.learner import TrainConfig
from layertrack.planner import PlannerOptions

SYSTEMS = ("unicycle", "quadrotor")
PROFILES = ("paper", "desk")


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    n_ilqr: int = 500  # unicycle
    n_poly: int = 500  # unicycle
    n_missions: int = 125  # quadrotor
    ilqr_input_weight: float = 0.1

    def __post_init__(self) -> None:
        for name in ("n_ilqr", "n_poly", "n_missions"):
            if getattr(self, name) < 0:
                raise ConfigError(f"data.{name} must be nonnegative")


@dataclass
class TrainSection:
    profile: str = "desk"
    epochs: int | None = None  # overrides of the profile
    learning_rate: float | None = None
    hidden: list[int] | None = None
    batch_size: int | None = None
    span_init: bool = True

    def __post_init__(self) -> None:
        if self.profile not in PROFILES:
            raise ConfigError(f"train.profile must be one of {PROFILES}")

    def resolve(self, system: str, seed: int) -> TrainConfig:
        base = TrainConfig.paper(system, seed) if self.profile == "paper" else TrainConfig.desk(system, seed)
        return TrainConfig(
            batch_size=self.batch_size or base.batch_size,
            learning_rate=self.learning_rate or base.learning_rate,
            momentum=base.momentum,
            epochs=self.epochs or base.epochs,
            seed=seed,
            hidden=tuple(self.hidden) if self.hidden else base.hidden,
            val_fraction=base.val_fraction,
            span_init=self.span_init,
        )


@dataclass
class PlanSection:
    waypoint_weight: float = 1.0
    max_iter: int | None = None  # default: 50 (unicycle PGD), 100 (quadrotor L-BFGS)
    rel_tol: float = 1e-6
    metric_order: int = 2

    def __post_init__(self) -> None:
        if not self.waypoint_weight > 0:
            raise ConfigError("plan.waypoint_weight must be positive")

    def options(self) -> PlannerOptions:
        return PlannerOptions(
            max_iter=self.max_iter,
            rel_tol=self.rel_tol,
            metric_order=self.metric_order,
        )


@dataclass
class EvalSection:
    n_test: int = 50
    n_runtime: int = 20
    n_windows: int = 3  # quadrotor replanning example

    def __post_init__(self) -> None:
        if self.n_test < 1 or self.n_runtime < 1 or self.n_windows < 1:
            raise ConfigError("eval counts must be positive")


@dataclass
class ExperimentConfig:
    system: str
    seed: int = 0
    dt: float | None = None
    horizon: int | None = None
    rhos: list[float] = field(default_factory=lambda: [0.01, 0.1, 1.0])
    gains: dict[str, Any] = field(default_factory=dict)
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    plan: PlanSection = field(default_factory=PlanSection)
    eval: EvalSection = field(default_factory=EvalSection)
    out_dir: str = "runs"

    def __post_init__(self) -> None:
        if self.system not in SYSTEMS:
            raise ConfigError(f"system must be one of {SYSTEMS}, got {self.system!r}")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")
        if self.dt is None:
            self.dt = UNICYCLE_DT if self.system == "unicycle" else QUADROTOR_DT
        if self.horizon is None:
            self.horizon = UNICYCLE_HORIZON if self.system == "unicycle" else QUADROTOR_HORIZON
        if not self.dt > 0 or self.horizon < 1:
            raise ConfigError("dt and horizon must be positive")
        if not self.rhos or any(not r > 0 for r in self.rhos):
            raise ConfigError("rhos must be a nonempty list of positive numbers")
        self.controller()  # validates the gain block

    def controller(self) -> UnicyclePolicyGains | Se3Gains:
        try:
            if self.system == "unicycle":
                return UnicyclePolicyGains(**self.gains)
            return Se3Gains(**{k: tuple(v) if isinstance(v, list) else v for k, v in self.gains.items()})
        except (TypeError, AssertionError, ValueError) as exc:
            raise ConfigError(f"invalid gains: {exc}") from exc

    def to_dict(self) -> dict:
        return asdict(self)

    def snapshot(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = known[name].default_factory() if callable(known[name].default_factory) else None
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}".strip("."))
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    try:
        return _build(ExperimentConfig, data, "")
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data)
