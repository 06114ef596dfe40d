import csv
import json

import numpy as np
import pytest

from layertrack.bench import BenchReport, BenchRow, evaluate_unicycle, read_rows
from layertrack.cli import load_mission, main
from layertrack.config import ConfigError, config_from_dict, load_config
from layertrack.controllers import Se3Gains, UnicyclePolicyGains, gains_hash
from layertrack.dataset import unicycle_test_instances
from layertrack.learner import load_model
from layertrack.planner import unicycle_objective

TINY = {
    "system": "unicycle",
    "horizon": 40,
    "data": {"n_ilqr": 3, "n_poly": 3},
    "train": {"epochs": 5, "hidden": [16]},
    "plan": {"max_iter": 5},
    "eval": {"n_test": 3, "n_runtime": 2},
}


def write_config(tmp_path, **overrides):
    cfg = {**TINY, **overrides, "out_dir": str(tmp_path / "out")}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def test_shipped_configs_load():
    for name in ("unicycle_desk", "unicycle_paper", "quadrotor_desk", "quadrotor_paper"):
        cfg = load_config(f"configs/{name}.json")
        assert cfg.rhos == [0.01, 0.1, 1.0]
    assert load_config("configs/quadrotor_desk.json").train.resolve("quadrotor", 0).hidden == (128, 64)


@pytest.mark.parametrize(
    "bad",
    [
        {"system": "boat"},
        {"system": "unicycle", "rhos": [0.0]},
        {"system": "unicycle", "tyop": 1},
        {"system": "unicycle", "train": {"profile": "huge"}},
        {"system": "unicycle", "plan": {"waypoint_weight": -1}},
        {"system": "quadrotor", "gains": {"kR": -1.0}},
        {"system": "unicycle", "eval": {"n_test": 0}},
    ],
)
def test_invalid_configs_are_rejected(bad):
    with pytest.raises(ConfigError):
        config_from_dict(bad)


def test_config_defaults_and_gains():
    cfg = config_from_dict({"system": "quadrotor", "gains": {"kp": [1, 2, 3]}})
    assert cfg.dt == 0.01 and cfg.horizon == 300
    assert cfg.controller() == Se3Gains(kp=(1, 2, 3))
    assert gains_hash(config_from_dict({"system": "unicycle"}).controller()) == gains_hash(UnicyclePolicyGains())


def test_summary_equals_recomputation_from_rows(tmp_path):
    rng = np.random.default_rng(0)
    report = BenchReport("unicycle")
    for rho in (0.1, 1.0):
        for i in range(9):
            a, b = rng.uniform(1, 2, 2)
            report.rows.append(BenchRow(i, rho, a, b, a / b, 0.01, 3, True))
    report.write_csv(tmp_path / "rows.csv", tmp_path / "summary.csv")
    rows = read_rows(tmp_path / "rows.csv")
    again = BenchReport("unicycle", rows).summary()
    with open(tmp_path / "summary.csv") as fh:
        written = list(csv.DictReader(fh))
    for s, w in zip(again, written):
        rel = [r.relative_cost for r in rows if r.rho == s["rho"]]
        assert s["median"] == float(np.median(rel)) == float(w["median"])
        assert s["mean"] == pytest.approx(np.mean(rel), abs=1e-15)


def test_baseline_against_itself_has_unit_ratio():
    from layertrack.bench import realized_cost_unicycle
    from layertrack.dataset import polynomial_reference

    for x0, wps in unicycle_test_instances(0, 5, 40):
        r = polynomial_reference(wps, 40, 0.05)
        c = realized_cost_unicycle(x0, r, 0.1)
        assert c / c == 1.0


def test_cli_error_line_and_exit_codes(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 2
    err = json.loads(capsys.readouterr().err.strip())
    assert err["command"] == "train" and err["error"] == "FileNotFoundError"
    bad = tmp_path / "bad.json"
    bad.write_text('{"system": "unicycle", "extra": 1}')
    assert main(["generate-data", "--config", str(bad)]) == 2
    assert json.loads(capsys.readouterr().err)["error"] == "ConfigError"
    quad = tmp_path / "q.json"
    quad.write_text(json.dumps({"system": "quadrotor", "out_dir": str(tmp_path / "q")}))
    assert main(["bench-runtime", "--config", str(quad)]) == 2


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("pipe")
    cfg = write_config(tmp)
    out = tmp / "out"
    assert main(["generate-data", "--config", str(cfg)]) == 0
    assert main(["train", "--config", str(cfg)]) == 0
    return tmp, cfg, out


def test_pipeline_artifacts(pipeline, capsys):
    tmp, cfg, out = pipeline
    meta = json.loads((out / "dataset_meta.json").read_text())
    assert meta["counts"] == {"ilqr": 3, "polynomial": 3} and meta["gains_hash"] == gains_hash(UnicyclePolicyGains())
    for rho in ("0.01", "0.1", "1"):
        assert (out / f"model_rho{rho}.json").exists() and (out / f"train_log_rho{rho}.csv").exists()
    assert json.loads((out / "config_resolved.json").read_text())["horizon"] == 40


def test_pipeline_is_byte_deterministic(pipeline, tmp_path):
    _, _, out = pipeline
    cfg = write_config(tmp_path)
    assert main(["generate-data", "--config", str(cfg)]) == 0
    assert main(["train", "--config", str(cfg), "--rho", "0.1"]) == 0
    fresh = tmp_path / "out"
    assert (fresh / "dataset.jsonl").read_bytes() == (out / "dataset.jsonl").read_bytes()
    assert (fresh / "model_rho0.1.json").read_bytes() == (out / "model_rho0.1.json").read_bytes()


def test_plan_round_trip_and_trace(pipeline, capsys):
    tmp, cfg, out = pipeline
    x0, wps = unicycle_test_instances(0, 1, 40)[0]
    mission = tmp / "mission.json"
    mission.write_text(json.dumps({"waypoints": wps.to_dict(), "x0": x0.tolist()}))
    model_path = out / "model_rho0.1.json"
    assert main(["plan", "--config", str(cfg), "--model", str(model_path), "--mission", str(mission)]) == 0
    capsys.readouterr()
    plan = np.array(json.loads((out / "plan.json").read_text())["reference"])
    with open(out / "plan_trace.csv") as fh:
        trace = [float(r["objective"]) for r in csv.DictReader(fh)]
    assert all(b <= a for a, b in zip(trace, trace[1:]))
    steps = wps.steps(0.05)
    keep = steps > 0
    J, _, _ = unicycle_objective(plan, x0, steps[keep], wps.points[keep], load_model(model_path))
    assert J == trace[-1]
    loaded_x0, loaded = load_mission(mission, "unicycle")
    assert np.array_equal(loaded_x0, x0) and np.array_equal(loaded.points, wps.points)


def test_evaluate_and_runtime_commands(pipeline, capsys):
    tmp, cfg, out = pipeline
    assert main(["evaluate", "--config", str(cfg), "--rho", "1"]) == 0
    rows = read_rows(out / "bench_rows.csv")
    assert len(rows) == 3 and all(r.rho == 1.0 for r in rows)
    assert main(["bench-runtime", "--config", str(cfg), "--rho", "1"]) == 0
    with open(out / "runtime.csv") as fh:
        runtime = list(csv.DictReader(fh))
    assert list(runtime[0]) == ["method", "run", "seconds"]
    assert sum(r["method"] == "planner" for r in runtime) == 2 == sum(r["method"] == "ilqr" for r in runtime)
    result = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert result["command"] == "bench-runtime"


def test_parallel_evaluation_matches_sequential(pipeline):
    _, _, out = pipeline
    model = load_model(out / "model_rho1.json")
    tests = unicycle_test_instances(0, 2, 40)
    from layertrack.planner import PlannerOptions

    opts = PlannerOptions(max_iter=3)
    seq = evaluate_unicycle([model], tests, options=opts, horizon=40)
    par = evaluate_unicycle([model], tests, options=opts, horizon=40, workers=2)
    assert [r.aware_cost for r in seq.rows] == [r.aware_cost for r in par.rows]
