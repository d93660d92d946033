import json

import pytest

from errors import ConfigError
from experiment_config import (CACHE_ENV, OUTPUT_ENV, SEED_ENV, DatasetConfig, ExperimentConfig, SweepConfig,
                               load_config, resolve_cache_dir, resolve_output_dir, resolve_seed)
from flow_model import ModelConfig
from probe import ProbeConfig
from spectral_transform import StftConfig
from synthetic_dataset import SynthConfig


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for name in (SEED_ENV, OUTPUT_ENV, CACHE_ENV):
        monkeypatch.delenv(name, raising=False)


def custom_config():
    return ExperimentConfig(
        dataset=DatasetConfig(synth=SynthConfig(num_windows=60, stft=StftConfig(nperseg=32, noverlap=16))),
        model=ModelConfig(num_layers=2, d_model=16, num_heads=2, d_ff=32),
        probe=ProbeConfig(metric="auroc", flow_times=[0.0, 0.5]),
        sweep=SweepConfig(factors=[1, 2]),
        output_dir="runs/unit",
        seed=4,
    )


def test_round_trip():
    cfg = custom_config()
    assert ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_save_and_load(tmp_path):
    cfg = custom_config()
    cfg.save(str(tmp_path / "nested" / "config.json"))
    assert load_config(str(tmp_path / "nested" / "config.json")) == cfg


def test_partial_file_uses_defaults(tmp_path):
    path = tmp_path / "exp.json"
    path.write_text(json.dumps({"train": {"epochs": 3}, "seed": 9}))
    cfg = load_config(str(path))
    assert cfg.train.epochs == 3 and cfg.seed == 9
    assert cfg.model == ModelConfig()
    assert cfg.dataset.synth == SynthConfig()


def test_unknown_fields_are_named(tmp_path):
    with pytest.raises(ConfigError) as err:
        ExperimentConfig.from_dict({"modle": {}})
    assert err.value.field == "modle"
    with pytest.raises(ConfigError) as err:
        ExperimentConfig.from_dict({"dataset": {"url": "x"}})
    assert err.value.field == "dataset.url"
    with pytest.raises(ConfigError) as err:
        ExperimentConfig.from_dict({"sweep": {"factor": [2]}})
    assert err.value.field == "sweep.factor"


def test_load_config_errors(tmp_path):
    assert load_config(None) == ExperimentConfig()
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "missing.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(str(bad))


def test_validate():
    cfg = ExperimentConfig(dataset=DatasetConfig())
    with pytest.raises(ConfigError) as err:
        cfg.validate()
    assert err.value.field == "dataset"
    cfg = custom_config()
    cfg.sweep.factors = [0]
    with pytest.raises(ConfigError):
        cfg.validate()
    custom_config().validate()


def test_seed_precedence(monkeypatch):
    cfg = ExperimentConfig(seed=1)
    assert resolve_seed(None, cfg) == 1
    monkeypatch.setenv(SEED_ENV, "2")
    assert resolve_seed(None, cfg) == 2
    assert resolve_seed(3, cfg) == 3
    monkeypatch.setenv(SEED_ENV, "two")
    with pytest.raises(ConfigError):
        resolve_seed(None, cfg)


def test_with_seed_propagates():
    cfg = ExperimentConfig().with_seed(11)
    assert (cfg.seed, cfg.train.seed, cfg.probe.seed, cfg.model.seed) == (11, 11, 11, 11)


def test_output_and_cache_dirs(monkeypatch):
    cfg = ExperimentConfig(output_dir="runs/a")
    assert resolve_output_dir(None, cfg) == "runs/a"
    monkeypatch.setenv(OUTPUT_ENV, "runs/env")
    assert resolve_output_dir(None, cfg) == "runs/env"
    assert resolve_output_dir("runs/flag", cfg) == "runs/flag"
    assert resolve_cache_dir("runs/a").endswith("caches")
    monkeypatch.setenv(CACHE_ENV, "/tmp/fgno-cache")
    assert resolve_cache_dir("runs/a") == "/tmp/fgno-cache"


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-v"]))
