"""
时间序列容器与加窗谱变换

把一维信号切成定长窗口，计算单边 STFT 幅度谱，并提供降采样、频率轴补零/裁剪
以及按频率通道的 z-score 归一化。所有函数都是纯函数。
"""
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import InvalidArgumentError

NORM_STD_FLOOR = 1e-8


@dataclass(frozen=True)
class TimeSeries:
    """一维原始信号"""
    samples: np.ndarray
    sampling_rate: float
    channel_id: str = ""

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if not self.sampling_rate > 0:
            raise InvalidArgumentError(f"sampling_rate must be positive, got {self.sampling_rate}")
        if not np.all(np.isfinite(samples)):
            raise InvalidArgumentError("samples contain NaN or Inf")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration_seconds(self) -> float:
        return len(self.samples) / self.sampling_rate


@dataclass(frozen=True)
class WindowSpec:
    """STFT 窗口参数：窗长 nperseg，重叠 noverlap，跳步 hop = nperseg - noverlap"""
    nperseg: int
    noverlap: int

    def __post_init__(self):
        if self.nperseg < 2:
            raise InvalidArgumentError(f"nperseg must be >= 2, got {self.nperseg}")
        if not 0 <= self.noverlap < self.nperseg:
            raise InvalidArgumentError(
                f"noverlap must be in [0, nperseg), got noverlap={self.noverlap}, nperseg={self.nperseg}")

    @property
    def hop(self) -> int:
        return self.nperseg - self.noverlap

    @property
    def num_bins(self) -> int:
        return self.nperseg // 2 + 1

    def num_frames(self, length: int) -> int:
        """长度为 length 的信号产生的帧数"""
        if length < self.nperseg:
            return 0
        return (length - self.nperseg) // self.hop + 1


@dataclass(frozen=True)
class Spectrogram:
    """
    F×T 幅度谱图

    Args:
        magnitudes: 形状 (F, T) 的实数网格
        freq_bin_hz: 每个频率格对应的 Hz
        frame_hop_seconds: 每帧对应的秒数
        source_rate_hz: 原始采样率
        normalized: 归一化后的谱图允许负值
    """
    magnitudes: np.ndarray
    freq_bin_hz: float
    frame_hop_seconds: float
    source_rate_hz: float
    normalized: bool = False

    def __post_init__(self):
        mags = np.asarray(self.magnitudes, dtype=np.float64)
        if mags.ndim != 2:
            raise InvalidArgumentError(f"spectrogram must be 2-D (F, T), got shape {mags.shape}")
        if not np.all(np.isfinite(mags)):
            raise InvalidArgumentError("spectrogram contains NaN or Inf")
        if not self.normalized and np.any(mags < 0):
            raise InvalidArgumentError("magnitudes must be non-negative")
        object.__setattr__(self, "magnitudes", mags)

    @property
    def num_bins(self) -> int:
        return self.magnitudes.shape[0]

    @property
    def num_frames(self) -> int:
        return self.magnitudes.shape[1]


@dataclass(frozen=True)
class NormStats:
    """按频率格的训练集均值与标准差（已做下限截断）"""
    mean: np.ndarray
    std: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "NormStats":
        return cls(mean=np.asarray(data["mean"], dtype=np.float64),
                   std=np.asarray(data["std"], dtype=np.float64))


def hann_window(n: int) -> np.ndarray:
    """周期 Hann 窗 w[k] = 0.5·(1 − cos(2πk/n))"""
    if n < 1:
        raise InvalidArgumentError(f"window length must be >= 1, got {n}")
    k = np.arange(n, dtype=np.float64)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * k / n))


def stft_magnitude(x: TimeSeries, spec: WindowSpec, log_magnitude: bool = False) -> Spectrogram:
    """
    计算单边 STFT 幅度谱

    Args:
        x: 输入信号
        spec: 窗口参数
        log_magnitude: 为 True 时返回 log(1 + |X|)

    Returns:
        形状 (nperseg/2 + 1, T) 的谱图，T = floor((len − nperseg)/hop) + 1
    """
    if len(x) < spec.nperseg:
        raise InvalidArgumentError(
            f"signal of {len(x)} samples is shorter than one window ({spec.nperseg})")
    frames = sliding_window_view(x.samples, spec.nperseg)[::spec.hop]
    spectrum = np.fft.rfft(frames * hann_window(spec.nperseg), axis=-1)
    magnitudes = np.abs(spectrum).T
    if log_magnitude:
        magnitudes = np.log1p(magnitudes)
    return Spectrogram(
        magnitudes=magnitudes,
        freq_bin_hz=x.sampling_rate / spec.nperseg,
        frame_hop_seconds=spec.hop / x.sampling_rate,
        source_rate_hz=x.sampling_rate,
    )


def segment_windows(x: TimeSeries, window_seconds: float) -> List[TimeSeries]:
    """切成不重叠的定长窗口，丢弃末尾不足一窗的部分"""
    window_len = int(np.floor(window_seconds * x.sampling_rate + 1e-9))
    if window_len < 1:
        raise InvalidArgumentError(
            f"window of {window_seconds}s at {x.sampling_rate} Hz holds no samples")
    count = len(x) // window_len
    return [
        TimeSeries(x.samples[i * window_len:(i + 1) * window_len], x.sampling_rate, x.channel_id)
        for i in range(count)
    ]


def downsample(x: TimeSeries, factor: int) -> TimeSeries:
    """块均值抽取：每个输出样本是 factor 个连续输入样本的均值"""
    if factor < 1:
        raise InvalidArgumentError(f"downsample factor must be >= 1, got {factor}")
    if len(x) < factor:
        raise InvalidArgumentError(f"signal of {len(x)} samples is shorter than factor {factor}")
    if factor == 1:
        return x
    n_out = len(x) // factor
    blocks = x.samples[:n_out * factor].reshape(n_out, factor)
    return TimeSeries(blocks.mean(axis=1), x.sampling_rate / factor, x.channel_id)


def zero_pad_frequency(sg: Spectrogram, target_bins: int) -> Spectrogram:
    """在频率轴末尾补零到 target_bins 行"""
    if target_bins < sg.num_bins:
        raise InvalidArgumentError(
            f"target_bins {target_bins} is smaller than current bin count {sg.num_bins}")
    padded = np.pad(sg.magnitudes, ((0, target_bins - sg.num_bins), (0, 0)))
    return replace(sg, magnitudes=padded)


def crop_frequency(sg: Spectrogram, bins: int) -> Spectrogram:
    """只保留前 bins 个频率格"""
    if not 1 <= bins <= sg.num_bins:
        raise InvalidArgumentError(f"crop to {bins} bins out of range [1, {sg.num_bins}]")
    return replace(sg, magnitudes=sg.magnitudes[:bins])


GridLike = Union[Spectrogram, np.ndarray]


def _as_grid_stack(windows: Sequence[GridLike]) -> np.ndarray:
    grids = [w.magnitudes if isinstance(w, Spectrogram) else np.asarray(w, dtype=np.float64)
             for w in windows]
    return np.stack(grids) if grids else np.empty((0, 0, 0))


def normalize_fit(windows: Sequence[GridLike]) -> NormStats:
    """在训练集上拟合每个频率格的均值和标准差"""
    if len(windows) == 0:
        raise InvalidArgumentError("normalize_fit needs a non-empty training set")
    if len(windows) < 2:
        raise InvalidArgumentError("normalize_fit needs at least 2 windows")
    stack = _as_grid_stack(windows)
    mean = stack.mean(axis=(0, 2))
    std = np.maximum(stack.std(axis=(0, 2)), NORM_STD_FLOOR)
    return NormStats(mean=mean, std=std)


def normalize_apply(sg: GridLike, stats: NormStats) -> GridLike:
    """用冻结的统计量做 z-score；输入是 Spectrogram 时返回 Spectrogram"""
    grid = sg.magnitudes if isinstance(sg, Spectrogram) else np.asarray(sg, dtype=np.float64)
    if grid.shape[-2] != stats.mean.shape[0]:
        raise InvalidArgumentError(
            f"normalize_apply: {grid.shape[-2]} bins vs stats for {stats.mean.shape[0]} bins")
    out = (grid - stats.mean[:, None]) / stats.std[:, None]
    if isinstance(sg, Spectrogram):
        return replace(sg, magnitudes=out, normalized=True)
    return out


def scaled_window_spec(base: WindowSpec, factor: int) -> Optional[WindowSpec]:
    """
    按降采样因子缩放窗口，保持窗口时长不变

    Returns:
        缩放后的 WindowSpec；nperseg 小于 2 时返回 None
    """
    nperseg = base.nperseg // factor
    if nperseg < 2:
        return None
    noverlap = min(base.noverlap // factor, nperseg - 1)
    return WindowSpec(nperseg=nperseg, noverlap=noverlap)


@dataclass(frozen=True)
class StftConfig:
    """
    数据集层面的谱图配置

    Args:
        nperseg: 窗长（样本数）
        noverlap: 重叠（样本数）
        log_magnitude: 是否取 log(1 + |X|)
        freq_crop: 只保留前 freq_crop 个频率格，None 表示不裁剪
    """
    nperseg: int = 64
    noverlap: int = 48
    log_magnitude: bool = False
    freq_crop: Optional[int] = None

    @property
    def window(self) -> WindowSpec:
        return WindowSpec(self.nperseg, self.noverlap)

    @property
    def num_bins(self) -> int:
        full = self.window.num_bins
        return full if self.freq_crop is None else min(self.freq_crop, full)


def spectrogram_of(x: TimeSeries, cfg: StftConfig, window: Optional[WindowSpec] = None) -> Spectrogram:
    """按配置计算谱图；window 给定时覆盖配置中的窗口（分辨率扫描使用）"""
    sg = stft_magnitude(x, window or cfg.window, log_magnitude=cfg.log_magnitude)
    if cfg.freq_crop is not None and cfg.freq_crop < sg.num_bins:
        sg = crop_frequency(sg, cfg.freq_crop)
    return sg
