import csv
import json

import pytest

from cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from experiment_config import CACHE_ENV, OUTPUT_ENV, SEED_ENV


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for name in (SEED_ENV, OUTPUT_ENV, CACHE_ENV):
        monkeypatch.delenv(name, raising=False)


@pytest.fixture
def config_path(tmp_path):
    """40 个窗口、两层 d_model=8 的最小实验"""
    config = {
        "dataset": {"synth": {"name": "cli", "num_windows": 40, "noise_amplitude": 0.3}},
        "model": {"num_layers": 2, "d_model": 8, "num_heads": 2, "d_ff": 12, "dropout": 0.0,
                  "freq_bins": 33, "max_frames": 17, "time_embed_dim": 4},
        "train": {"epochs": 1, "batch_size": 8, "learning_rate": 1e-3},
        "probe": {"metric": "auroc", "flow_times": [0.0, 1.0], "max_iter": 100},
        "sweep": {"factors": [1, 2], "num_noise_seeds": 2, "clean_reruns": 2},
        "seed": 0,
    }
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(config))
    return str(path)


def run(*argv):
    return main([str(a) for a in argv])


def test_help_and_usage_errors(capsys):
    assert run("--help") == EXIT_OK
    assert run("train-everything") == EXIT_USAGE
    assert run("probe", "--method", "bert") == EXIT_USAGE


def test_missing_config_file(tmp_path):
    assert run("gen-synth", "--config", tmp_path / "nope.json", "--output", tmp_path / "out") == EXIT_USAGE


def test_invalid_config_value(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"model": {"d_model": 10, "num_heads": 4}}))
    assert run("gen-synth", "--config", path, "--output", tmp_path / "out") == EXIT_USAGE


def test_probe_without_dataset(config_path, tmp_path):
    assert run("probe", "--config", config_path, "--output", tmp_path / "empty") == EXIT_USAGE


def test_probe_without_checkpoint(config_path, tmp_path):
    out = tmp_path / "run"
    assert run("gen-synth", "--config", config_path, "--output", out) == EXIT_OK
    assert run("probe", "--config", config_path, "--output", out) == EXIT_USAGE


def test_corrupt_checkpoint_is_runtime_error(config_path, tmp_path):
    out = tmp_path / "run"
    assert run("gen-synth", "--config", config_path, "--output", out) == EXIT_OK
    assert run("pretrain", "--config", config_path, "--output", out) == EXIT_OK
    header = out / "checkpoints" / "fgno" / "header.json"
    data = json.loads(header.read_text())
    data["format_version"] = 999
    header.write_text(json.dumps(data))
    assert run("probe", "--config", config_path, "--output", out) == EXIT_RUNTIME


def test_full_workflow(config_path, tmp_path):
    out = tmp_path / "run"
    assert run("gen-synth", "--config", config_path, "--output", out, "--seed", 5) == EXIT_OK
    assert (out / "dataset" / "manifest.json").exists()

    for method in ("fgno", "mae"):
        assert run("pretrain", "--config", config_path, "--output", out, "--method", method) == EXIT_OK
        assert (out / "checkpoints" / method / "header.json").exists()
        with open(out / f"train_log_{method}.csv", newline="") as f:
            rows = list(csv.DictReader(f))
        assert [r["split"] for r in rows].count("train") == 4

        assert run("probe", "--config", config_path, "--output", out, "--method", method) == EXIT_OK
        result = json.loads((out / f"probe_{method}.json").read_text())
        assert result["metric"] == "auroc"
        assert len(result["val_matrix"]) == 2
        assert (out / f"grid_{method}.csv").exists()
        assert (out / f"test_report_{method}.json").exists()

    mae_result = json.loads((out / "probe_mae.json").read_text())
    assert mae_result["flow_times"] == [1.0]

    assert run("ablate", "--config", config_path, "--output", out, "--num-noise-seeds", 2) == EXIT_OK
    ablation = json.loads((out / "ablation_fgno.json").read_text())
    assert len(ablation["noisy_values"]) == 2
    assert ablation["clean_std"] == 0.0

    assert run("sweep", "--config", config_path, "--output", out, "--factors", 1, 2, 64) == EXIT_OK
    with open(out / "sweep_fgno.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert [r["factor"] for r in rows] == ["1", "2", "64"]
    assert [r["status"] for r in rows][:2] == ["ok", "ok"]
    assert rows[2]["status"].startswith("skipped")

    saved = json.loads((out / "config.json").read_text())
    assert saved["seed"] == 0
    assert saved["model"]["freq_bins"] == 33

    assert run("report", out, tmp_path / "missing-run", "--output", tmp_path / "report") == EXIT_OK
    report = json.loads((tmp_path / "report" / "report.json").read_text())
    assert {"run": "missing-run", "artifact": "run directory"} in report["missing"]
    assert "run__probe_fgno.json" in report["files"]
    assert json.loads((tmp_path / "report" / "config.json").read_text())["seed"] == 0


def test_seed_flag_is_recorded(config_path, tmp_path):
    out = tmp_path / "run"
    assert run("gen-synth", "--config", config_path, "--output", out, "--seed", 5) == EXIT_OK
    saved = json.loads((out / "config.json").read_text())
    assert saved["seed"] == 5
    assert saved["train"]["seed"] == 5 and saved["probe"]["seed"] == 5


def test_low_label_fraction(config_path, tmp_path):
    out = tmp_path / "run"
    assert run("gen-synth", "--config", config_path, "--output", out) == EXIT_OK
    assert run("pretrain", "--config", config_path, "--output", out) == EXIT_OK
    assert run("probe", "--config", config_path, "--output", out, "--fraction", 0.05) == EXIT_OK
    result = json.loads((out / "probe_fgno.json").read_text())
    assert result["subsample"]["per_class"] == {"0": 1, "1": 1}
    assert result["train_size"] == 2


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-v"]))
