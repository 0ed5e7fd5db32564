import json
import subprocess
import sys
from pathlib import Path

import pytest

from feedsim.scenario import (
    ScenarioError,
    build_world,
    load_scenario,
    nominal_meal_scenario,
    validate_scenario,
)

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def run_cli(*args, timeout=240):
    return subprocess.run([sys.executable, "-m", "feedsim.cli", *args],
                          capture_output=True, text=True, timeout=timeout)


class TestScenarioValidation:
    def test_nominal_scenario_validates_and_builds(self):
        data = nominal_meal_scenario()
        validate_scenario(data)
        w = build_world(data)
        assert len(w.plate) == 3 and w.rng_seed == 42

    def test_shipped_scenarios_all_validate(self):
        files = sorted(SCENARIOS.glob("*.json"))
        assert len(files) >= 7
        for f in files:
            load_scenario(f)

    def test_missing_schema_version(self):
        data = nominal_meal_scenario()
        del data["schema_version"]
        with pytest.raises(ScenarioError):
            validate_scenario(data)

    def test_wrong_schema_version(self):
        data = nominal_meal_scenario()
        data["schema_version"] = 99
        with pytest.raises(ScenarioError):
            validate_scenario(data)

    def test_bad_probability_rejected(self):
        data = nominal_meal_scenario()
        data["plate"][0]["ground_truth_success"]["0"] = 1.7
        with pytest.raises(ScenarioError):
            validate_scenario(data)

    def test_duplicate_food_id_rejected(self):
        data = nominal_meal_scenario()
        data["plate"][1]["id"] = data["plate"][0]["id"]
        with pytest.raises(ScenarioError):
            validate_scenario(data)

    def test_unknown_script_action_rejected(self):
        data = nominal_meal_scenario()
        data["script"].append({"action": "launch"})
        with pytest.raises(ScenarioError):
            validate_scenario(data)

    def test_invalid_json_file(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        with pytest.raises(ScenarioError):
            load_scenario(p)


class TestHeadlessCli:
    def test_malformed_scenario_exits_nonzero_without_motion(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"schema_version": 99, "seed": 1}))
        result = run_cli("run", "--scenario", str(bad),
                         "--report", str(tmp_path / "r.json"))
        assert result.returncode == 2
        assert not (tmp_path / "r.json").exists()

    def test_disconnect_scenario_report_shows_stop(self, tmp_path):
        report_path = tmp_path / "report.json"
        result = run_cli("run", "--scenario", str(SCENARIOS / "ft_disconnect.json"),
                         "--report", str(report_path), "--no-plots")
        assert result.returncode == 0, result.stderr
        report = json.loads(report_path.read_text())
        kinds = [e["kind"] for e in report["safety_events"]]
        assert "fault" in kinds and "controllers_killed" in kinds
        assert any(v["detail"] == ["FORCE_SENSOR_STALE"] for v in report["violations"])

    def test_report_bundle_includes_csv_and_figures(self, tmp_path):
        report_path = tmp_path / "meal.json"
        result = run_cli("run", "--scenario", str(SCENARIOS / "estop.json"),
                         "--report", str(report_path))
        assert result.returncode == 0, result.stderr
        assert report_path.exists()
        assert (tmp_path / "meal_telemetry.csv").stat().st_size > 0
        figures = list(tmp_path.glob("meal_*.png"))
        assert len(figures) >= 2
        first = (tmp_path / "meal_telemetry.csv").read_text().splitlines()[0]
        assert first.startswith("t,q0,q1")

    def test_dataset_and_train_pipeline(self, tmp_path):
        ds_path = tmp_path / "d.json"
        lib_path = tmp_path / "library.json"
        r1 = run_cli("dataset", "--n", "80", "--seed", "3", "--out", str(ds_path))
        assert r1.returncode == 0
        r2 = subprocess.run([sys.executable, "-c",
                             "from feedsim.cli import acquire_train; acquire_train()",
                             "--dataset", str(ds_path), "--k", "11", "--seed", "7",
                             "--out", str(lib_path)],
                            capture_output=True, text=True, timeout=120)
        assert r2.returncode == 0, r2.stderr
        lib = json.loads(lib_path.read_text())
        assert len(lib["medoids"]) == 11
        assert lib["provenance"]["k"] == 11

    def test_bandit_checkpoint_roundtrip(self, tmp_path):
        ckpt = tmp_path / "bandit.json"
        scenario = nominal_meal_scenario(bites=1, seed=5)
        spath = tmp_path / "meal.json"
        spath.write_text(json.dumps(scenario))
        r1 = run_cli("run", "--scenario", str(spath), "--report",
                     str(tmp_path / "r1.json"), "--no-plots",
                     "--bandit-checkpoint", str(ckpt))
        assert r1.returncode == 0, r1.stderr
        saved = json.loads(ckpt.read_text())
        assert saved["bandit"]["attempts"] >= 1
        r2 = run_cli("run", "--scenario", str(spath), "--report",
                     str(tmp_path / "r2.json"), "--no-plots",
                     "--bandit-checkpoint", str(ckpt))
        assert r2.returncode == 0, r2.stderr
        reloaded = json.loads(ckpt.read_text())
        assert reloaded["bandit"]["attempts"] > saved["bandit"]["attempts"]


class TestConfigFile:
    def test_config_overrides_and_rejects_unknown_keys(self, tmp_path, monkeypatch):
        from feedsim.config import ConfigError, load_config
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps({"gate_f_max": 6.0}))
        monkeypatch.setenv("FEEDSIM_CONFIG", str(p))
        cfg = load_config()
        assert cfg["gate_f_max"] == 6.0 and cfg["receiver_timeout"] == 0.3
        p.write_text(json.dumps({"gaet_f_max": 6.0}))
        with pytest.raises(ConfigError):
            load_config()
