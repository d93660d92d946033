import dataclasses

import numpy as np
import pytest

from autodiff import Tensor
from checkpoint import read_header
from errors import ConfigError, InvalidArgumentError, TrainingDivergedError
from flow_model import FlowTransformer
from pretrain import (LOG_COLUMNS, MaskedAutoencoder, SpectrogramCorpus, StepRecord, TrainConfig, TrainLog,
                      masked_mse, random_mask, read_train_log, train_flow, train_mae)
from spectral_transform import Spectrogram, normalize_fit


def corpus_of(rng, config, n=12):
    return SpectrogramCorpus(rng.standard_normal((n, config.freq_bins, config.max_frames)))


def test_corpus_from_spectrograms(rng):
    sgs = [Spectrogram(np.abs(rng.standard_normal((5, 4))), 1.0, 1.0, 8.0) for _ in range(3)]
    stats = normalize_fit(sgs)
    corpus = SpectrogramCorpus.from_spectrograms(sgs, stats)
    assert corpus.grids.shape == (3, 5, 4) and corpus.grids.dtype == np.float32
    np.testing.assert_allclose(corpus.grids.mean(axis=(0, 2)), 0.0, atol=1e-5)
    with pytest.raises(InvalidArgumentError):
        SpectrogramCorpus(np.zeros((5, 4)))


def test_zero_epochs_is_a_no_op(tiny_model_config, rng, tmp_path):
    model = FlowTransformer(tiny_model_config)
    before = model.fingerprint()
    config = TrainConfig(epochs=0, log_path=str(tmp_path / "log.csv"))
    _, log = train_flow(model, corpus_of(rng, tiny_model_config), None, config)
    assert len(log) == 0
    assert model.fingerprint() == before
    assert (tmp_path / "log.csv").read_text().strip() == ",".join(LOG_COLUMNS)


def test_same_seed_same_loss_log(tiny_model_config, rng, tmp_path):
    config = dataclasses.replace(tiny_model_config, dropout=0.1)
    train = corpus_of(rng, config)
    val = corpus_of(rng, config, n=4)
    for run in ("a", "b"):
        cfg = TrainConfig(epochs=2, batch_size=4, learning_rate=1e-3, seed=5,
                          log_path=str(tmp_path / f"{run}.csv"))
        train_flow(FlowTransformer(config), train, val, cfg)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    records = read_train_log(str(tmp_path / "a.csv"))
    assert [r.split for r in records].count("train") == 6
    assert [r.split for r in records].count("val") == 2


def test_different_seed_different_losses(tiny_model_config, rng):
    train = corpus_of(rng, tiny_model_config)
    logs = []
    for seed in (1, 2):
        _, log = train_flow(FlowTransformer(tiny_model_config), train, None,
                            TrainConfig(epochs=1, batch_size=4, seed=seed))
        logs.append(log.losses())
    assert logs[0] != logs[1]


def test_flow_loss_decreases(tiny_model_config, rng):
    pattern = rng.standard_normal((tiny_model_config.freq_bins, tiny_model_config.max_frames))
    train = SpectrogramCorpus(np.repeat(pattern[None], 32, axis=0))
    config = TrainConfig(epochs=25, batch_size=8, learning_rate=3e-3, seed=0)
    _, log = train_flow(FlowTransformer(tiny_model_config), train, None, config)
    losses = log.losses()
    assert len(losses) == 100
    assert np.mean(losses[-20:]) < 0.9 * np.mean(losses[:20])


def test_max_steps_and_checkpoints(tiny_model_config, rng, tmp_path):
    ckpt = tmp_path / "ckpt"
    config = TrainConfig(epochs=5, batch_size=4, max_steps=4, checkpoint_every=2,
                         checkpoint_dir=str(ckpt))
    model, log = train_flow(FlowTransformer(tiny_model_config), corpus_of(rng, tiny_model_config), None, config,
                            extra={"source": "unit"})
    assert [r.step for r in log.records] == [1, 2, 3, 4]
    assert (ckpt / "step-000002" / "header.json").exists()
    assert (ckpt / "step-000004" / "header.json").exists()
    header = read_header(str(ckpt))
    assert header["kind"] == "fgno" and header["extra"]["source"] == "unit"
    loaded, _ = FlowTransformer.load(str(ckpt), expected=tiny_model_config)
    assert loaded.fingerprint() == model.fingerprint()


def test_divergence_raises_with_diagnostic(tiny_model_config):
    grids = np.full((4, tiny_model_config.freq_bins, tiny_model_config.max_frames), np.nan)
    with pytest.raises(TrainingDivergedError) as err:
        train_flow(FlowTransformer(tiny_model_config), SpectrogramCorpus(grids), None,
                   TrainConfig(epochs=1, batch_size=2))
    assert err.value.diagnostic["step"] == 1
    assert err.value.diagnostic["batch_size"] == 2


def test_empty_corpus_rejected(tiny_model_config):
    empty = SpectrogramCorpus(np.zeros((0, tiny_model_config.freq_bins, tiny_model_config.max_frames)))
    with pytest.raises(InvalidArgumentError):
        train_flow(FlowTransformer(tiny_model_config), empty, None, TrainConfig())


def test_train_config_validation():
    with pytest.raises(ConfigError) as err:
        TrainConfig(schedule="sigmoid").validate()
    assert err.value.field == "schedule"
    with pytest.raises(ConfigError) as err:
        TrainConfig(mask_ratio=1.0).validate()
    assert err.value.field == "mask_ratio"
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"lr": 0.1})
    assert TrainConfig.from_dict(TrainConfig(epochs=3).to_dict()).epochs == 3


def test_train_log_rules(tmp_path):
    log = TrainLog(str(tmp_path / "sub" / "log.csv"))
    log.append(StepRecord(1, 0, "train", 0.5))
    log.append(StepRecord(2, 0, "train", 0.25))
    with pytest.raises(InvalidArgumentError):
        log.append(StepRecord(3, 0, "train", float("nan")))
    with pytest.raises(InvalidArgumentError):
        log.append(StepRecord(1, 0, "train", 0.1))
    assert [r.loss for r in read_train_log(log.path)] == [0.5, 0.25]
    np.testing.assert_allclose(log.smoothed(window=2), [0.375])
    assert log.smoothed("val").size == 0


def test_random_mask_columns():
    grid = np.arange(6 * 17, dtype=np.float64).reshape(6, 17) + 1.0
    masked, mask = random_mask(grid, 0.5, np.random.default_rng(0))
    columns = np.where(mask[0] == 1)[0]
    assert len(columns) == 9
    assert np.all(mask[:, columns] == 1)
    assert np.all(masked[:, columns] == 0)
    keep = np.setdiff1d(np.arange(17), columns)
    np.testing.assert_array_equal(masked[:, keep], grid[:, keep])
    with pytest.raises(InvalidArgumentError):
        random_mask(grid, 0.0, np.random.default_rng(0))


def test_masked_mse_ignores_visible_positions(rng):
    target = rng.standard_normal((2, 3, 4))
    mask = np.zeros_like(target)
    mask[:, :, 1] = 1
    pred = rng.standard_normal(target.shape)
    other = pred.copy()
    other[:, :, 0] += 10.0
    a = masked_mse(Tensor(pred), target, mask).item()
    assert a == masked_mse(Tensor(other), target, mask).item()
    assert a == pytest.approx(np.mean((pred[:, :, 1] - target[:, :, 1]) ** 2))


def test_mae_on_zero_dataset_has_zero_loss(tiny_model_config):
    zeros = SpectrogramCorpus(np.zeros((8, tiny_model_config.freq_bins, tiny_model_config.max_frames)))
    _, log = train_mae(FlowTransformer(tiny_model_config), zeros, None, TrainConfig(epochs=2, batch_size=4))
    assert log.losses() == [0.0] * 4


def test_mae_head_starts_at_zero(tiny_model_config, rng):
    mae = MaskedAutoencoder(FlowTransformer(tiny_model_config))
    x = rng.standard_normal((2, tiny_model_config.freq_bins, tiny_model_config.max_frames))
    assert np.all(mae.reconstruct(x, train=False).data == 0)


def test_mae_training_and_checkpoint(tiny_model_config, rng, tmp_path):
    config = TrainConfig(epochs=2, batch_size=4, learning_rate=1e-3, mae_flow_time=1.0,
                         checkpoint_dir=str(tmp_path / "mae"))
    mae, log = train_mae(FlowTransformer(tiny_model_config), corpus_of(rng, tiny_model_config),
                         corpus_of(rng, tiny_model_config, n=4), config)
    assert len(log.losses("val")) == 2
    header = read_header(str(tmp_path / "mae"))
    assert header["kind"] == "mae" and header["extra"]["mae_flow_time"] == 1.0
    names = {p["name"] for p in header["parameters"]}
    assert {"mae_head.weight", "mae_head.bias"} <= names
    backbone, _ = FlowTransformer.load(str(tmp_path / "mae"))
    assert backbone.fingerprint() == mae.backbone.fingerprint()


def test_mae_features_ignore_flow_time(tiny_model_config, rng):
    mae = MaskedAutoencoder(FlowTransformer(tiny_model_config), flow_time=1.0)
    phi = rng.standard_normal((tiny_model_config.freq_bins, tiny_model_config.max_frames))
    np.testing.assert_array_equal(mae.extract_features(phi, 1, 0.2), mae.extract_features(phi, 1, 0.9))


def test_pretrainer_sees_no_labels():
    corpus = SpectrogramCorpus(np.zeros((2, 3, 4)))
    assert not hasattr(corpus, "labels")
    assert [name for name in vars(corpus)] == ["_grids"]


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-v"]))
