import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from flow_model import ModelConfig  # noqa: E402
from spectral_transform import StftConfig  # noqa: E402
from synthetic_dataset import SynthConfig  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="运行耗时的端到端实验")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: 端到端实验，默认跳过")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow") or os.getenv("FGNO_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="需要 --runslow 或 FGNO_RUN_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model_config():
    """两层、d_model=8 的微型模型，float64 便于梯度检查"""
    return ModelConfig(num_layers=2, d_model=8, num_heads=2, d_ff=12, dropout=0.0,
                       freq_bins=5, max_frames=4, time_embed_dim=4, dtype="float64", seed=3)


@pytest.fixture
def small_synth_config():
    """64 Hz、5 秒窗口，谱图为 33×17"""
    return SynthConfig(name="unit", num_windows=40, noise_amplitude=0.3,
                       stft=StftConfig(nperseg=64, noverlap=48))


@pytest.fixture
def desk_model_config():
    return ModelConfig(num_layers=2, d_model=16, num_heads=2, d_ff=32, dropout=0.0,
                       freq_bins=33, max_frames=17, time_embed_dim=8)
