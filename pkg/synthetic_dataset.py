"""
带标签的窗口与合成数据集

分类模式：每个窗口是正弦加高斯噪声，类别决定主频所在的频带；
回归模式：调幅信号，目标是窗口内包络幅度的真实均值。
同一个种子生成的数据集逐位相同；第 i 个窗口的子种子为 seed XOR i。
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ConfigError
from spectral_transform import Spectrogram, StftConfig, TimeSeries, spectrogram_of

SPLITS = ("train", "val", "test")
MODES = ("classification", "regression")


@dataclass
class LabeledWindow:
    """一个带标签的窗口：谱图、标签、所属划分，以及原始信号（分辨率扫描需要）"""
    spectrogram: Spectrogram
    label: Union[int, float]
    split_tag: str
    series: Optional[TimeSeries] = None
    index: int = 0

    def __post_init__(self):
        if self.split_tag not in SPLITS:
            raise ConfigError("split_tag", f"must be one of {SPLITS}, got {self.split_tag!r}")
        if isinstance(self.label, float) and not np.isfinite(self.label):
            raise ConfigError("label", "regression target must be finite")


@dataclass
class SynthConfig:
    """
    合成数据集配置

    Args:
        name: 数据集名称
        mode: classification 或 regression
        num_classes: 分类类别数（>= 2）
        num_windows: 窗口总数
        sampling_rate_hz: 采样率
        window_seconds: 窗口时长
        noise_amplitude: 高斯噪声标准差
        signal_amplitude: 正弦幅度（分类模式）
        band_low_hz / band_high_hz: 类别频带覆盖的范围，均分为 num_classes 段
        split_fractions: train/val/test 比例
        workers: 并行生成的线程数
    """
    name: str = "synth"
    mode: str = "classification"
    num_classes: int = 2
    num_windows: int = 200
    sampling_rate_hz: float = 64.0
    window_seconds: float = 5.0
    noise_amplitude: float = 0.5
    signal_amplitude: float = 1.0
    band_low_hz: float = 1.0
    band_high_hz: float = 7.0
    split_fractions: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    workers: int = 1
    stft: StftConfig = field(default_factory=StftConfig)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError("mode", f"must be one of {MODES}, got {self.mode!r}")
        if self.mode == "classification" and self.num_classes < 2:
            raise ConfigError("num_classes", f"classification needs >= 2 classes, got {self.num_classes}")
        if self.num_windows < 1:
            raise ConfigError("num_windows", "must be >= 1")
        if self.sampling_rate_hz <= 0:
            raise ConfigError("sampling_rate_hz", "must be positive")
        if self.noise_amplitude < 0:
            raise ConfigError("noise_amplitude", "must be non-negative")
        nyquist = self.sampling_rate_hz / 2
        if not 0 < self.band_low_hz < self.band_high_hz < nyquist:
            raise ConfigError("band_high_hz", f"bands must satisfy 0 < low < high < {nyquist} Hz")
        if self.window_samples < self.stft.nperseg:
            raise ConfigError("window_seconds", "window is shorter than one STFT segment")
        fractions = tuple(self.split_fractions)
        if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
            raise ConfigError("split_fractions", "need three non-negative fractions summing to 1")

    @property
    def window_samples(self) -> int:
        return int(np.floor(self.window_seconds * self.sampling_rate_hz + 1e-9))

    def class_band(self, label: int) -> Tuple[float, float]:
        """第 label 类的频带，两端各留出带宽 20% 的间隔"""
        width = (self.band_high_hz - self.band_low_hz) / self.num_classes
        guard = 0.2 * width
        low = self.band_low_hz + label * width
        return low + guard, low + width - guard

    def to_dict(self) -> dict:
        data = asdict(self)
        data["split_fractions"] = list(self.split_fractions)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "SynthConfig":
        data = dict(data)
        stft = data.pop("stft", None)
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown synth config field")
        if "split_fractions" in data:
            data["split_fractions"] = tuple(data["split_fractions"])
        cfg = cls(**data)
        if stft is not None:
            cfg.stft = StftConfig(**stft)
        return cfg


def _split_boundaries(n: int, fractions: Sequence[float]) -> Tuple[int, int]:
    train_end = int(np.floor(fractions[0] * n + 0.5))
    val_end = int(np.floor((fractions[0] + fractions[1]) * n + 0.5))
    return train_end, max(train_end, val_end)


def assign_splits(n: int, fractions: Sequence[float] = (0.8, 0.1, 0.1)) -> List[str]:
    """按位置把 n 个样本划分为 train/val/test"""
    train_end, val_end = _split_boundaries(n, fractions)
    return ["train" if j < train_end else "val" if j < val_end else "test" for j in range(n)]


def _synth_signal(cfg: SynthConfig, index: int, seed: int) -> Tuple[np.ndarray, Union[int, float]]:
    rng = np.random.default_rng(seed ^ index)
    n = cfg.window_samples
    t = np.arange(n) / cfg.sampling_rate_hz
    if cfg.mode == "classification":
        label = index % cfg.num_classes
        low, high = cfg.class_band(label)
        freq = rng.uniform(low, high)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        clean = cfg.signal_amplitude * np.sin(2.0 * np.pi * freq * t + phase)
    else:
        carrier = 0.5 * (cfg.band_low_hz + cfg.band_high_hz)
        base = rng.uniform(0.5, 2.0)
        depth = rng.uniform(0.0, 0.5) * base
        mod_freq = rng.uniform(0.2, 1.0)
        envelope = base + depth * np.sin(2.0 * np.pi * mod_freq * t + rng.uniform(0.0, 2.0 * np.pi))
        clean = envelope * np.sin(2.0 * np.pi * carrier * t + rng.uniform(0.0, 2.0 * np.pi))
        label = float(envelope.mean())
    noise = cfg.noise_amplitude * rng.standard_normal(n)
    # 与磁盘上的 float32 格式对齐，重新加载后逐位相同
    samples = (clean + noise).astype("<f4").astype(np.float64)
    return samples, label


def synth_dataset(cfg: SynthConfig, seed: int) -> List[LabeledWindow]:
    """
    生成合成数据集

    Args:
        cfg: 数据集配置
        seed: 随机种子

    Returns:
        按窗口序号排列的 LabeledWindow 列表
    """
    cfg.validate()
    indices = range(cfg.num_windows)
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            generated = list(pool.map(lambda i: _synth_signal(cfg, i, seed), indices))
    else:
        generated = [_synth_signal(cfg, i, seed) for i in indices]

    tags = _split_tags(cfg, [label for _, label in generated])
    windows = []
    for i, ((samples, label), tag) in enumerate(zip(generated, tags)):
        series = TimeSeries(samples, cfg.sampling_rate_hz, channel_id="ch0")
        windows.append(LabeledWindow(
            spectrogram=spectrogram_of(series, cfg.stft),
            label=label,
            split_tag=tag,
            series=series,
            index=i,
        ))
    return windows


def _split_tags(cfg: SynthConfig, labels: Sequence[Union[int, float]]) -> List[str]:
    if cfg.mode == "regression":
        return assign_splits(len(labels), cfg.split_fractions)
    # 分类：每个类别内部按出现顺序划分，各划分的类别计数相差不超过 1
    tags = [""] * len(labels)
    for c in range(cfg.num_classes):
        members = [i for i, label in enumerate(labels) if label == c]
        for i, tag in zip(members, assign_splits(len(members), cfg.split_fractions)):
            tags[i] = tag
    return tags


def split_windows(windows: Sequence[LabeledWindow]) -> Dict[str, List[LabeledWindow]]:
    """按 split_tag 分组，组内保持原顺序"""
    groups: Dict[str, List[LabeledWindow]] = {tag: [] for tag in SPLITS}
    for w in windows:
        groups[w.split_tag].append(w)
    return groups


def stack_grids(windows: Sequence[LabeledWindow]) -> np.ndarray:
    """把窗口的谱图堆叠成 (N, F, T)"""
    return np.stack([w.spectrogram.magnitudes for w in windows])


def labels_of(windows: Sequence[LabeledWindow]) -> np.ndarray:
    return np.asarray([w.label for w in windows])
