"""
Command-line entry point: ``layertrack <command> --config <path> [options]``.

Commands write into ``--out`` (default: the config's ``out_dir``) and always
leave a ``config_resolved.json`` snapshot there.  Failures print one JSON
line ``{"error": ..., "message": ..., "command": ...}`` to stderr and exit
with status 2 (bad input) or 1 (anything else).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from layertrack import __version__
from layertrack.bench import bench_runtime_unicycle, evaluate_quadrotor, evaluate_unicycle
from layertrack.config import ConfigError, ExperimentConfig, load_config
from layertrack.controllers import gains_hash
from layertrack.dataset import (
    generate_quadrotor_dataset,
    generate_unicycle_dataset,
    label_dataset,
    load_dataset,
    quadrotor_test_missions,
    save_dataset,
    unicycle_test_instances,
)
from layertrack.dynamics import pack_quadrotor, rot_z
from layertrack.errors import DatasetFormatError, LayerTrackError
from layertrack.learner import load_model, save_model, train
from layertrack.planner import PlanSpec, plan_quadrotor, plan_unicycle
from layertrack.trajgen import WaypointSet

logger = logging.getLogger("layertrack")

DATASET_FILE = "dataset.jsonl"
DATASET_META_FILE = "dataset_meta.json"
SNAPSHOT_FILE = "config_resolved.json"


def rho_tag(rho: float) -> str:
    return f"{rho:g}"


def model_file(rho: float) -> str:
    return f"model_rho{rho_tag(rho)}.json"


def train_log_file(rho: float) -> str:
    return f"train_log_rho{rho_tag(rho)}.csv"


# --------------------------------------------------------------------------- commands


def cmd_generate_data(cfg: ExperimentConfig, out: Path, args) -> dict:
    gains = cfg.controller()
    if cfg.system == "unicycle":
        records, meta = generate_unicycle_dataset(
            cfg.seed, cfg.data.n_ilqr, cfg.data.n_poly, cfg.horizon, cfg.dt, gains, cfg.data.ilqr_input_weight
        )
    else:
        records, meta = generate_quadrotor_dataset(cfg.seed, cfg.data.n_missions, cfg.horizon, cfg.dt, gains)
    digest = save_dataset(records, out / DATASET_FILE)
    summary = {**meta.__dict__, "sha256": digest, "n_records": len(records)}
    (out / DATASET_META_FILE).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def cmd_train(cfg: ExperimentConfig, out: Path, args) -> dict:
    records = load_dataset(Path(args.dataset) if args.dataset else out / DATASET_FILE)
    if any(r.system != cfg.system for r in records):
        raise DatasetFormatError(f"dataset contains records for a system other than {cfg.system!r}")
    ghash = gains_hash(cfg.controller())
    if any(r.gains_hash != ghash for r in records):
        logger.warning("dataset was generated with different controller gains than the config")
    rhos = [args.rho] if args.rho is not None else cfg.rhos
    tcfg = cfg.train.resolve(cfg.system, cfg.seed)
    done = {}
    for rho in rhos:
        model, log = train(label_dataset(records, rho), tcfg, rho, cfg.system, ghash)
        save_model(model, out / model_file(rho))
        (out / train_log_file(rho)).write_text(log.to_csv())
        done[rho_tag(rho)] = {"model": model_file(rho), "final_train_loss": log.train_loss[-1], "final_val_loss": log.val_loss[-1]}
    return done


def load_mission(path: str | Path, system: str) -> tuple[np.ndarray, WaypointSet]:
    """Mission JSON: {"waypoints": {"times": [...], "points": [[...]]}, "x0": [...] (optional)}."""
    d = json.loads(Path(path).read_text())
    wps = WaypointSet.from_dict(d["waypoints"])
    if "x0" in d:
        x0 = np.asarray(d["x0"], dtype=float)
    elif system == "unicycle":
        x0 = wps.points[0].copy()
    else:
        x0 = pack_quadrotor(wps.points[0][:3], np.zeros(3), rot_z(float(wps.points[0][3])))
    return x0, wps


def cmd_plan(cfg: ExperimentConfig, out: Path, args) -> dict:
    if not args.model or not args.mission:
        raise ConfigError("plan requires --model and --mission")
    model = load_model(args.model)
    x0, wps = load_mission(args.mission, cfg.system)
    spec = PlanSpec(
        x0, wps, model, cfg.plan.waypoint_weight, cfg.plan.options(), cfg.horizon, cfg.dt, gains_hash(cfg.controller())
    )
    if cfg.system == "unicycle":
        res = plan_unicycle(spec)
        (out / "plan.json").write_text(json.dumps({"dt": cfg.dt, "reference": res.reference.tolist()}) + "\n")
    else:
        res = plan_quadrotor(spec)
        (out / "plan.json").write_text(res.poly.to_json() + "\n")
    with open(out / "plan_trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "objective"])
        for i, J in enumerate(res.trace):
            w.writerow([i, repr(float(J))])
    return {"iterations": res.iterations, "converged": res.converged, "objective": res.trace[-1], "predicted_penalty": res.predicted_penalty}


def _models(cfg: ExperimentConfig, out: Path, args) -> list:
    if args.model:
        return [load_model(args.model)]
    rhos = [args.rho] if args.rho is not None else cfg.rhos
    return [load_model(out / model_file(rho)) for rho in rhos]


def cmd_evaluate(cfg: ExperimentConfig, out: Path, args) -> dict:
    models = _models(cfg, out, args)
    opts = cfg.plan.options()
    if cfg.system == "unicycle":
        tests = unicycle_test_instances(cfg.seed, cfg.eval.n_test, cfg.horizon, cfg.dt)
        report = evaluate_unicycle(models, tests, cfg.controller(), opts, cfg.dt, cfg.horizon, cfg.plan.waypoint_weight, args.workers)
    else:
        tests = quadrotor_test_missions(cfg.seed, cfg.eval.n_test, cfg.dt)
        report = evaluate_quadrotor(models, tests, cfg.controller(), opts, cfg.dt, cfg.horizon, cfg.plan.waypoint_weight, args.workers)
    report.write_csv(out / "bench_rows.csv", out / "bench_summary.csv")
    return {rho_tag(s["rho"]): {k: s[k] for k in ("mean", "median", "mean_aware", "mean_baseline")} for s in report.summary()}


def cmd_bench_runtime(cfg: ExperimentConfig, out: Path, args) -> dict:
    if cfg.system != "unicycle":
        raise ConfigError("bench-runtime compares against iLQR and is defined for the unicycle only")
    model = _models(cfg, out, args)[0]
    tests = unicycle_test_instances(cfg.seed, cfg.eval.n_runtime, cfg.horizon, cfg.dt)
    report = bench_runtime_unicycle(model, tests, cfg.controller(), cfg.plan.options(), cfg.dt, cfg.horizon)
    report.write_csv(out / "runtime.csv")
    (p_mean, p_std), (i_mean, i_std) = report.stats("planner"), report.stats("ilqr")
    return {"planner_mean": p_mean, "planner_std": p_std, "ilqr_mean": i_mean, "ilqr_std": i_std, "planner_faster": p_mean < i_mean}


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "plan": cmd_plan,
    "evaluate": cmd_evaluate,
    "bench-runtime": cmd_bench_runtime,
}


# --------------------------------------------------------------------------- plumbing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="layertrack", description="Learned tracking penalties for layered trajectory planning.")
    p.add_argument("--version", action="version", version=f"layertrack {__version__}")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="experiment config (JSON)")
    p.add_argument("--rho", type=float, default=None, help="restrict to one tracking weight")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="output directory (default: config out_dir)")
    p.add_argument("--dataset", default=None, help="train: dataset path (default: <out>/dataset.jsonl)")
    p.add_argument("--model", default=None, help="plan/evaluate/bench-runtime: model checkpoint")
    p.add_argument("--mission", default=None, help="plan: mission JSON")
    p.add_argument("--workers", type=int, default=1, help="evaluate: worker processes")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _fail(command: str, exc: BaseException, code: int) -> int:
    line = {"error": type(exc).__name__, "message": str(exc), "command": command}
    print(json.dumps(line), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.rho is not None and not args.rho > 0:
            raise ConfigError("--rho must be positive")
        out = Path(args.out or cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cfg.snapshot(out / SNAPSHOT_FILE)
        result = COMMANDS[args.command](cfg, out, args)
    except (ConfigError, DatasetFormatError, FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
        return _fail(args.command, exc, 2)
    except (LayerTrackError, OSError, ValueError) as exc:
        return _fail(args.command, exc, 1)
    print(json.dumps({"command": args.command, "out": str(out), "result": result}, default=float))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
