import json
from pathlib import Path

import pytest
import yaml
from click.testing import CliRunner

from haipred.cli import main

CONFIG = {
    "seed": 3,
    "output_dir": None,  # filled per test
    "scenario": {
        "n_patients": 280,
        "fraction_ventilated": 0.35,
        "infection_rates": {"VAP": 0.35, "CLABSI": 0.08},
        "missingness_rates": {
            "temperature": {"case": 0.1, "control": 0.5},
            "wbc": {"case": 0.1, "control": 0.5},
        },
        "ventilated_missingness_rates": {
            "temperature": {"case": 0.3, "control": 0.3},
            "wbc": {"case": 0.3, "control": 0.3},
        },
        "rng_seed": 3,
    },
    "labeling": {"contiguity_window_hours": 24, "novelty_lookback_hours": 48},
    "features": {"prediction_gap_hours": 24},
    "cohort": {"n_repeats": 3, "train_fraction": 0.8, "validation_fraction": 0.2},
    "learner": {
        "grid": {
            "max_depth": [3],
            "n_rounds": [20],
            "learning_rate": [0.3],
        }
    },
    "experiment": {
        "rows": [
            {"model_target": "IRI", "missingness_strategy": "gaussian_impute"},
            {"model_target": "IRI", "missingness_strategy": "balance_missingness"},
        ]
    },
}


@pytest.fixture()
def config_file(tmp_path):
    cfg = json.loads(json.dumps(CONFIG))
    cfg["output_dir"] = str(tmp_path / "run")
    path = tmp_path / "pipeline.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def invoke(*args):
    runner = CliRunner()
    return runner.invoke(main, [str(a) for a in args])


class TestStagePipeline:
    def test_stages_run_in_order(self, config_file, tmp_path):
        run = tmp_path / "run"
        for stage in ("generate", "label", "cohort", "featurize", "train", "evaluate"):
            result = invoke(stage, "--config", config_file)
            assert result.exit_code == 0, f"{stage}: {result.output}"
        assert (run / "dataset" / "stays.csv").exists()
        assert (run / "labels" / "labels.csv").exists()
        assert (run / "cohort" / "row0" / "splits.jsonl").exists()
        assert (run / "features" / "row0" / "split1_train_values.csv").exists()
        assert (run / "features" / "row0" / "split1_train_mask.csv").exists()
        assert (run / "models" / "row0" / "split1.json").exists()
        metrics = json.loads((run / "report" / "row0" / "metrics.json").read_text())
        assert metrics["splits"]
        assert list((run / "report" / "row0").glob("*.svg"))

    def test_missing_upstream_is_dependency_error(self, config_file):
        result = invoke("evaluate", "--config", config_file)
        assert result.exit_code == 2
        assert "first" in result.output

    def test_label_before_generate_fails(self, config_file):
        result = invoke("label", "--config", config_file)
        assert result.exit_code == 2
        assert "generate" in result.output

    def test_rerun_is_cached_noop(self, config_file):
        first = invoke("generate", "--config", config_file)
        assert first.exit_code == 0 and "[cached]" not in first.output
        second = invoke("generate", "--config", config_file)
        assert second.exit_code == 0 and "[cached]" in second.output

    def test_seed_override_invalidates_cache(self, config_file):
        assert invoke("generate", "--config", config_file).exit_code == 0
        result = invoke("generate", "--config", config_file, "--seed", "99")
        assert result.exit_code == 0
        assert "[cached]" not in result.output


class TestExperimentCommand:
    def test_experiment_end_to_end(self, config_file, tmp_path):
        result = invoke("experiment", "--config", config_file)
        assert result.exit_code == 0, result.output
        run = tmp_path / "run" / "experiment"
        assert (run / "summary_table.txt").exists()
        table = (run / "summary_table.txt").read_text()
        assert "IRI with gaussian imputation" in table
        row_dirs = sorted(p for p in run.iterdir() if p.is_dir())
        assert len(row_dirs) == 2
        for row_dir in row_dirs:
            metrics = json.loads((row_dir / "metrics.json").read_text())
            assert "aggregate" in metrics
        assert (run / "config_used.json").exists()

    def test_experiment_cached_on_rerun(self, config_file):
        assert invoke("experiment", "--config", config_file).exit_code == 0
        again = invoke("experiment", "--config", config_file)
        assert again.exit_code == 0 and "[cached]" in again.output

    def test_metrics_json_byte_identical_across_fresh_runs(self, config_file, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert invoke("experiment", "--config", config_file, "--out", out_a).exit_code == 0
        assert invoke("experiment", "--config", config_file, "--out", out_b).exit_code == 0
        for row_dir in sorted((out_a / "experiment").iterdir()):
            if not row_dir.is_dir():
                continue
            twin = out_b / "experiment" / row_dir.name
            assert (row_dir / "metrics.json").read_bytes() == (twin / "metrics.json").read_bytes()


class TestConfigValidation:
    def test_unknown_keys_rejected(self, tmp_path):
        cfg = json.loads(json.dumps(CONFIG))
        cfg["output_dir"] = str(tmp_path / "run")
        cfg["scenario"]["tpyo_field"] = 1
        path = tmp_path / "bad.yaml"
        path.write_text(yaml.safe_dump(cfg))
        result = invoke("generate", "--config", path)
        assert result.exit_code != 0
        assert "unknown keys" in result.output

    def test_missing_config_file(self, tmp_path):
        result = invoke("generate", "--config", tmp_path / "nope.yaml")
        assert result.exit_code != 0
        assert "not found" in result.output

    def test_bad_strategy_rejected(self, tmp_path):
        cfg = json.loads(json.dumps(CONFIG))
        cfg["output_dir"] = str(tmp_path / "run")
        cfg["experiment"]["rows"] = [
            {"model_target": "IRI", "missingness_strategy": "zero_fill"}
        ]
        path = tmp_path / "bad.yaml"
        path.write_text(yaml.safe_dump(cfg))
        result = invoke("generate", "--config", path)
        assert result.exit_code != 0
