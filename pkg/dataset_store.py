import json
import os
import shutil
from typing import List, Optional

import numpy as np

from errors import ConfigError, InvalidArgumentError
from spectral_transform import StftConfig, TimeSeries, spectrogram_of
from synthetic_dataset import MODES, LabeledWindow, SynthConfig

MANIFEST_NAME = "manifest.json"
WINDOW_DIR = "windows"
FORMAT_VERSION = 1
# 所有窗口文件均为小端 float32
WINDOW_DTYPE = "<f4"


class DatasetStore:
    """
    数据集目录封装类

    目录结构:
        manifest.json          name, mode, num_classes, sampling_rate_hz, window_seconds,
                               stft, format_version, byte_order, dtype, entries[]
        windows/000000.f32     每个窗口一份原始小端 float32 样本

    entries[] 的每一项: file, label, split, channel_id, num_samples
    """

    def __init__(self, root: str):
        """初始化数据集目录"""
        self.root = root
        self.manifest: Optional[dict] = None

    @property
    def manifest_path(self) -> str:
        return os.path.join(self.root, MANIFEST_NAME)

    def has_dataset(self) -> bool:
        return os.path.isfile(self.manifest_path)

    def create_dataset(self, name: str, mode: str, num_classes: int, sampling_rate_hz: float,
                       window_seconds: float, stft: Optional[StftConfig] = None,
                       drop_if_exists: bool = True):
        """创建数据集

        Args:
            name: 数据集名称
            mode: classification 或 regression
            num_classes: 类别数（回归时记为 0）
            sampling_rate_hz: 采样率
            window_seconds: 窗口时长
            stft: 谱图配置，加载时用于重算谱图
            drop_if_exists: 如果存在是否删除重建
        """
        if mode not in MODES:
            raise ConfigError("mode", f"must be one of {MODES}, got {mode!r}")
        if drop_if_exists and os.path.isdir(self.root):
            shutil.rmtree(self.root)
        os.makedirs(os.path.join(self.root, WINDOW_DIR), exist_ok=True)

        stft = stft or StftConfig()
        self.manifest = {
            "format_version": FORMAT_VERSION,
            "name": name,
            "mode": mode,
            "num_classes": int(num_classes) if mode == "classification" else 0,
            "sampling_rate_hz": float(sampling_rate_hz),
            "window_seconds": float(window_seconds),
            "byte_order": "little",
            "dtype": "float32",
            "stft": {
                "nperseg": stft.nperseg,
                "noverlap": stft.noverlap,
                "log_magnitude": stft.log_magnitude,
                "freq_crop": stft.freq_crop,
            },
            "entries": [],
        }
        self._write_manifest()
        print(f"创建数据集 '{name}' 成功: {self.root}")

    @classmethod
    def from_synth_config(cls, root: str, cfg: SynthConfig) -> "DatasetStore":
        store = cls(root)
        store.create_dataset(cfg.name, cfg.mode, cfg.num_classes, cfg.sampling_rate_hz,
                             cfg.window_seconds, cfg.stft)
        return store

    def insert_windows(self, windows: List[LabeledWindow]) -> int:
        """插入窗口到数据集

        Args:
            windows: 带原始信号的窗口列表

        Returns:
            插入的窗口数量
        """
        manifest = self._require_manifest()
        entries = manifest["entries"]
        for w in windows:
            if w.series is None:
                raise InvalidArgumentError(f"window {w.index} carries no raw series")
            file_name = f"{len(entries):06d}.f32"
            w.series.samples.astype(WINDOW_DTYPE).tofile(os.path.join(self.root, WINDOW_DIR, file_name))
            label = int(w.label) if manifest["mode"] == "classification" else float(w.label)
            entries.append({
                "file": f"{WINDOW_DIR}/{file_name}",
                "label": label,
                "split": w.split_tag,
                "channel_id": w.series.channel_id,
                "num_samples": len(w.series),
            })
        self._write_manifest()
        print(f"插入了 {len(windows)} 个窗口到数据集 '{manifest['name']}'")
        return len(windows)

    def load_windows(self, stft: Optional[StftConfig] = None) -> List[LabeledWindow]:
        """读取全部窗口并重算谱图

        Args:
            stft: 覆盖 manifest 中的谱图配置

        Returns:
            LabeledWindow 列表，顺序与 entries 一致
        """
        manifest = self._require_manifest()
        stft = stft or StftConfig(**manifest["stft"])
        rate = manifest["sampling_rate_hz"]
        windows = []
        for i, entry in enumerate(manifest["entries"]):
            raw = np.fromfile(os.path.join(self.root, entry["file"]), dtype=WINDOW_DTYPE)
            if len(raw) != entry["num_samples"]:
                raise InvalidArgumentError(
                    f"{entry['file']}: expected {entry['num_samples']} samples, found {len(raw)}")
            series = TimeSeries(raw.astype(np.float64), rate, entry.get("channel_id", ""))
            label = int(entry["label"]) if manifest["mode"] == "classification" else float(entry["label"])
            windows.append(LabeledWindow(spectrogram=spectrogram_of(series, stft), label=label,
                                         split_tag=entry["split"], series=series, index=i))
        return windows

    def print_summary(self):
        """打印数据集概况"""
        manifest = self._require_manifest()
        counts = {}
        for entry in manifest["entries"]:
            counts[entry["split"]] = counts.get(entry["split"], 0) + 1
        print(f"\n数据集: {manifest['name']} ({manifest['mode']})")
        print(f"   采样率: {manifest['sampling_rate_hz']} Hz, 窗口: {manifest['window_seconds']} s")
        print(f"   划分: {', '.join(f'{k}={v}' for k, v in sorted(counts.items()))}")

    def _require_manifest(self) -> dict:
        if self.manifest is None:
            if not self.has_dataset():
                raise FileNotFoundError(f"no {MANIFEST_NAME} under {self.root}")
            with open(self.manifest_path, "r", encoding="utf-8") as f:
                self.manifest = json.load(f)
            if self.manifest.get("format_version") != FORMAT_VERSION:
                raise ConfigError("format_version", f"unsupported manifest version in {self.root}")
        return self.manifest

    def _write_manifest(self):
        with open(self.manifest_path, "w", encoding="utf-8") as f:
            json.dump(self.manifest, f, indent=2, sort_keys=True)
            f.write("\n")
