"""
Tests for experiment configuration loading and the command-line entry point.
"""

import json
import os

import pytest

from app_config import ExperimentConfig, load_experiment_config
from main import main
from modules.errors import ConfigError
from modules.persistence import load_checkpoint


def _config_file(tmp_path, **values):
    path = tmp_path / "experiment.env"
    path.write_text("".join(f"{key}={value}\n" for key, value in values.items()), encoding="utf-8")
    return str(path)


class TestLoadConfig:
    def test_parses_file_values(self, tmp_path):
        path = _config_file(tmp_path, n_grid="64,128", alpha="1.5", warm_start="false", T="auto", L0="2",
                            output_format="json")
        cfg = load_experiment_config(path)
        assert cfg.n_grid == [64, 128]
        assert cfg.alpha == 1.5
        assert cfg.warm_start is False
        assert cfg.T is None and cfg.L0 == 2.0
        assert cfg.output_format == "json"

    def test_overrides_win(self, tmp_path):
        path = _config_file(tmp_path, alpha="1.5", tasks="150")
        cfg = load_experiment_config(path, {"alpha": 3.0, "tasks": None}, kind="compare")
        assert cfg.alpha == 3.0 and cfg.tasks == 150 and cfg.kind == "compare"

    def test_unknown_key(self, tmp_path):
        with pytest.raises(ConfigError):
            load_experiment_config(_config_file(tmp_path, bandwidth="0.3"))

    def test_unparsable_value(self, tmp_path):
        with pytest.raises(ConfigError):
            load_experiment_config(_config_file(tmp_path, tasks="many"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_experiment_config(str(tmp_path / "absent.env"))

    @pytest.mark.parametrize("kwargs", [dict(n_grid=[128, 64]), dict(n_grid=[]), dict(density_kind="gaussian"),
                                        dict(task_family="splines"), dict(output_format="xml"),
                                        dict(optimizer="lbfgs"), dict(tasks=1), dict(kind="plot"), dict(alpha=0.0)])
    def test_validation(self, kwargs):
        with pytest.raises(ConfigError):
            ExperimentConfig(**kwargs)

    def test_round_trips_through_dict(self):
        cfg = ExperimentConfig(n_grid=[8, 16], seed=3)
        assert ExperimentConfig(**cfg.to_dict()) == cfg


class TestCommandLine:
    def test_covering_bound(self, tmp_path):
        out = tmp_path / "out"
        assert main(["covering-bound", "--out-dir", str(out), "--n-grid", "64,128"]) == 0
        assert (out / "covering.csv").exists()
        assert main(["covering-bound", "--out-dir", str(out), "--n-grid", "64,128"]) == 2
        assert main(["covering-bound", "--out-dir", str(out), "--n-grid", "64,128", "--overwrite"]) == 0

    def test_missing_config_file(self, tmp_path):
        assert main(["rates", "--config", str(tmp_path / "absent.env")]) == 2

    def test_invalid_grid(self, tmp_path):
        assert main(["rates", "--n-grid", "64,32", "--out-dir", str(tmp_path)]) == 2

    def test_simulate(self, tmp_path):
        path = _config_file(tmp_path, gamma="3")
        out = tmp_path / "sets"
        assert main(["simulate", "--config", path, "--n-grid", "8,16", "--out-dir", str(out), "--seed", "11"]) == 0
        with open(out / "pretrain_n16.jsonl", encoding="utf-8") as handle:
            records = [json.loads(line) for line in handle]
        assert len(records) == 3 and records[0]["n"] == 16 and records[0]["seed"] == 12

    def test_construct_writes_checkpoint(self, tmp_path):
        path = _config_file(tmp_path, T="2", calibration_prompts="3")
        out = tmp_path / "models"
        assert main(["construct", "--config", path, "--n-grid", "16", "--out-dir", str(out)]) == 0
        params = load_checkpoint(str(out / "construct_n16.lptf"))
        with open(out / "construct_n16.lptf.json", encoding="utf-8") as handle:
            sidecar = json.load(handle)
        assert params.arch.L == sidecar["provenance"]["build_report"]["total_blocks"]
        assert sidecar["provenance"]["construction"]["T"] == 2

    def test_infeasible_construction(self, tmp_path):
        path = _config_file(tmp_path, T="2", L0="0.01", calibration_prompts="3")
        assert main(["construct", "--config", path, "--n-grid", "64", "--out-dir", str(tmp_path / "m")]) == 3

    def test_compare_check_failure(self, tmp_path):
        path = _config_file(tmp_path, T="1", calibration_prompts="3", n_prompts="5")
        out = tmp_path / "cmp"
        assert main(["compare", "--config", path, "--n-grid", "16", "--out-dir", str(out), "--check"]) == 4
        assert (out / "compare.csv").exists()

    def test_cold_start_training(self, tmp_path):
        path = _config_file(tmp_path, T="2", calibration_prompts="3")
        out = tmp_path / "train"
        code = main(["train", "--config", path, "--cold-start", "--epochs", "1", "--gamma", "4", "--tasks", "4",
                     "--n-grid", "8", "--out-dir", str(out)])
        assert code == 0
        for name in ("train_curve.csv", "train_n8.lptf", "train_risk.csv"):
            assert os.path.exists(out / name)
        assert load_checkpoint(str(out / "train_n8.lptf")).arch.L == 7
