import dataclasses

import numpy as np
import pytest

from autodiff import Tape, mse
from errors import CheckpointMismatchError, ConfigError, InvalidArgumentError
from flow_matching import fm_loss, make_flow_batch
from flow_model import FlowTransformer, ModelConfig, time_embed


def random_grid(rng, config, batch=None, frames=None):
    frames = frames or config.max_frames
    shape = (config.freq_bins, frames) if batch is None else (batch, config.freq_bins, frames)
    return rng.standard_normal(shape)


def test_forward_shapes(tiny_model_config, rng):
    model = FlowTransformer(tiny_model_config)
    x = random_grid(rng, tiny_model_config)
    velocity, hidden = model.forward(x, 0.3)
    assert velocity.shape == x.shape
    assert len(hidden) == tiny_model_config.num_layers
    assert hidden.layer(1).shape == (tiny_model_config.max_frames, tiny_model_config.d_model)

    xb = random_grid(rng, tiny_model_config, batch=3, frames=2)
    velocity, hidden = model.forward(xb, np.array([0.1, 0.5, 0.9]))
    assert velocity.shape == xb.shape
    assert hidden.layer(2).shape == (3, 2, tiny_model_config.d_model)


def test_rejects_bad_inputs(tiny_model_config, rng):
    model = FlowTransformer(tiny_model_config)
    with pytest.raises(InvalidArgumentError):
        model.forward(rng.standard_normal((tiny_model_config.freq_bins + 1, 3)), 0.5)
    with pytest.raises(InvalidArgumentError):
        model.forward(random_grid(rng, tiny_model_config, frames=tiny_model_config.max_frames + 1), 0.5)
    with pytest.raises(InvalidArgumentError):
        model.forward(random_grid(rng, tiny_model_config, batch=2), np.array([0.1, 0.2, 0.3]))
    with pytest.raises(InvalidArgumentError):
        model.extract_features(random_grid(rng, tiny_model_config), 0, 0.5)


def test_same_seed_same_model(tiny_model_config, rng):
    a = FlowTransformer(tiny_model_config)
    b = FlowTransformer(tiny_model_config)
    assert a.fingerprint() == b.fingerprint()
    x = random_grid(rng, tiny_model_config)
    assert a(x, 0.4).data.tobytes() == b(x, 0.4).data.tobytes()
    other = FlowTransformer(dataclasses.replace(tiny_model_config, seed=4))
    assert other.fingerprint() != a.fingerprint()


def test_eval_forward_is_deterministic(rng):
    config = ModelConfig(num_layers=2, d_model=8, num_heads=2, d_ff=12, dropout=0.5,
                         freq_bins=5, max_frames=4, time_embed_dim=4, dtype="float64")
    model = FlowTransformer(config).eval()
    x = random_grid(rng, config)
    assert model(x, 0.2).data.tobytes() == model(x, 0.2).data.tobytes()
    model.train(seed=0)
    first = model(x, 0.2).data
    second = model(x, 0.2).data
    assert not np.array_equal(first, second)


def test_output_depends_on_flow_time(tiny_model_config, rng):
    for mode in ("concat", "add"):
        model = FlowTransformer(dataclasses.replace(tiny_model_config, time_conditioning=mode))
        x = random_grid(rng, tiny_model_config)
        assert not np.allclose(model(x, 0.1).data, model(x, 0.9).data)


def test_batch_matches_single(tiny_model_config, rng):
    model = FlowTransformer(tiny_model_config)
    xb = random_grid(rng, tiny_model_config, batch=3)
    s = np.array([0.0, 0.5, 0.99])
    batched = model(xb, s).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], model(xb[i], float(s[i])).data, rtol=1e-10, atol=1e-12)


def test_last_tap_feeds_output_projection(tiny_model_config, rng):
    model = FlowTransformer(tiny_model_config)
    x = random_grid(rng, tiny_model_config)
    velocity, hidden = model.forward(x, 0.7)
    last = hidden.layer(tiny_model_config.num_layers)
    projected = last @ model.params["out.weight"].data + model.params["out.bias"].data
    np.testing.assert_allclose(velocity.data, projected.T, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("mode", ["concat", "add"])
def test_every_parameter_receives_gradient(tiny_model_config, rng, mode):
    config = dataclasses.replace(tiny_model_config, time_conditioning=mode)
    model = FlowTransformer(config)
    x = random_grid(rng, config, batch=2)
    target = rng.standard_normal(x.shape)
    with Tape() as tape:
        loss = mse(model(x, np.array([0.2, 0.8])), target)
    tape.backward(loss)
    dead = [name for name, p in model.params.items() if not np.any(p.grad != 0)]
    assert dead == []


def test_model_gradient_matches_finite_differences(tiny_model_config, rng):
    model = FlowTransformer(tiny_model_config)
    phi = random_grid(rng, tiny_model_config, batch=2)
    batch = make_flow_batch(phi, rng.standard_normal(phi.shape), np.array([0.3, 0.6]))

    def loss_value():
        return fm_loss(model, batch).item()

    with Tape() as tape:
        loss = fm_loss(model, batch)
    tape.backward(loss)

    h = 1e-5
    for name in ("lift.weight", "pos_embed", "blocks.0.attn.q.weight", "blocks.0.attn.k.weight",
                 "blocks.1.ln2.gamma", "blocks.1.ff1.bias", "out.bias"):
        p = model.params[name]
        flat = p.data.reshape(-1)
        for i in rng.choice(flat.size, size=min(4, flat.size), replace=False):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_value()
            flat[i] = orig - h
            down = loss_value()
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            analytic = p.grad.reshape(-1)[i]
            assert abs(numeric - analytic) <= 1e-4 * max(1e-6, abs(numeric) + abs(analytic)), name


def test_time_embed():
    emb = time_embed(0.0, 6)
    np.testing.assert_array_equal(emb[0::2], 0.0)
    np.testing.assert_array_equal(emb[1::2], 1.0)
    assert time_embed(np.array([0.1, 0.2, 0.3]), 8).shape == (3, 8)
    # 第一个频率为 1，角度是 s·1000
    assert time_embed(0.5, 4)[0] == pytest.approx(np.sin(500.0))
    with pytest.raises(InvalidArgumentError):
        time_embed(0.5, 5)
    with pytest.raises(InvalidArgumentError):
        time_embed(1.5, 4)


def test_noisy_features_at_one_equal_clean(tiny_model_config, rng):
    model = FlowTransformer(tiny_model_config)
    phi = random_grid(rng, tiny_model_config)
    clean = model.extract_features(phi, 2, 1.0)
    noisy = model.extract_features_noisy(phi, 2, 1.0, noise_seed=3)
    np.testing.assert_array_equal(clean, noisy)


def test_noisy_features_vary_with_seed(tiny_model_config, rng):
    model = FlowTransformer(tiny_model_config)
    phi = random_grid(rng, tiny_model_config)
    a = model.extract_features_noisy(phi, 1, 0.5, noise_seed=1)
    b = model.extract_features_noisy(phi, 1, 0.5, noise_seed=1)
    c = model.extract_features_noisy(phi, 1, 0.5, noise_seed=2)
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)


def test_extracted_features_are_copies(tiny_model_config, rng):
    model = FlowTransformer(tiny_model_config)
    phi = random_grid(rng, tiny_model_config)
    z = model.extract_features(phi, 1, 0.5)
    z[:] = 0.0
    assert np.any(model.extract_features(phi, 1, 0.5) != 0.0)


def test_checkpoint_round_trip(tmp_path, tiny_model_config, rng):
    model = FlowTransformer(tiny_model_config)
    model.params["out.bias"].data += 0.25
    model.save(str(tmp_path / "ckpt"), extra={"note": "unit"})
    loaded, header = FlowTransformer.load(str(tmp_path / "ckpt"), expected=tiny_model_config)
    assert header["kind"] == "fgno" and header["extra"]["note"] == "unit"
    assert loaded.fingerprint() == model.fingerprint()
    x = random_grid(rng, tiny_model_config)
    assert loaded(x, 0.5).data.tobytes() == model(x, 0.5).data.tobytes()


def test_checkpoint_float32_round_trip(tmp_path, rng):
    config = ModelConfig(num_layers=1, d_model=4, num_heads=1, d_ff=4, freq_bins=3, max_frames=2,
                         time_embed_dim=2)
    model = FlowTransformer(config)
    model.save(str(tmp_path / "ckpt"))
    loaded, _ = FlowTransformer.load(str(tmp_path / "ckpt"))
    for name, p in model.params.items():
        assert loaded.params[name].data.dtype == np.float32
        assert loaded.params[name].data.tobytes() == p.data.tobytes()


def test_checkpoint_mismatch(tmp_path, tiny_model_config):
    FlowTransformer(tiny_model_config).save(str(tmp_path / "ckpt"))
    other = dataclasses.replace(tiny_model_config, d_model=12)
    with pytest.raises(CheckpointMismatchError):
        FlowTransformer.load(str(tmp_path / "ckpt"), expected=other)
    # 种子不属于结构，不同种子仍可加载
    FlowTransformer.load(str(tmp_path / "ckpt"), expected=dataclasses.replace(tiny_model_config, seed=99))
    with pytest.raises(FileNotFoundError):
        FlowTransformer.load(str(tmp_path / "missing"))


def test_model_config_validation():
    with pytest.raises(ConfigError) as err:
        ModelConfig(d_model=10, num_heads=4).validate()
    assert err.value.field == "num_heads"
    with pytest.raises(ConfigError) as err:
        ModelConfig(time_conditioning="film").validate()
    assert err.value.field == "time_conditioning"
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"layers": 3})
    full = ModelConfig.full_scale()
    assert (full.num_layers, full.d_model, full.num_heads, full.d_ff) == (6, 768, 12, 3072)


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-v"]))
