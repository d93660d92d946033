"""
实验配置

JSON 文件，顶层键：dataset, model, train, probe, sweep, output_dir, seed。
dataset 二选一：{"path": "..."} 指向已有数据集目录，或 {"synth": {...}} 现场生成。
"""
import json
import os
from dataclasses import dataclass, field
from typing import List, Optional

from dotenv import load_dotenv

from errors import ConfigError
from flow_model import ModelConfig
from pretrain import TrainConfig
from probe import ProbeConfig
from spectral_transform import StftConfig
from synthetic_dataset import SynthConfig

load_dotenv()  # 加载环境变量

SEED_ENV = "FGNO_SEED"
OUTPUT_ENV = "FGNO_OUTPUT_DIR"
CACHE_ENV = "FGNO_CACHE_DIR"


@dataclass
class DatasetConfig:
    path: Optional[str] = None
    synth: Optional[SynthConfig] = None

    def to_dict(self) -> dict:
        data = {}
        if self.path is not None:
            data["path"] = self.path
        if self.synth is not None:
            data["synth"] = self.synth.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetConfig":
        unknown = set(data) - {"path", "synth"}
        if unknown:
            raise ConfigError(f"dataset.{sorted(unknown)[0]}", "unknown dataset field")
        synth = SynthConfig.from_dict(data["synth"]) if data.get("synth") is not None else None
        return cls(path=data.get("path"), synth=synth)


@dataclass
class SweepConfig:
    """分辨率扫描：降采样因子，以及是否按因子换算幅度"""
    factors: List[int] = field(default_factory=lambda: [1, 2, 4])
    rescale_magnitude: bool = True
    num_noise_seeds: int = 10
    clean_reruns: int = 3

    def to_dict(self) -> dict:
        return {"factors": list(self.factors), "rescale_magnitude": self.rescale_magnitude,
                "num_noise_seeds": self.num_noise_seeds, "clean_reruns": self.clean_reruns}

    @classmethod
    def from_dict(cls, data: dict) -> "SweepConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"sweep.{sorted(unknown)[0]}", "unknown sweep field")
        return cls(**data)


@dataclass
class ExperimentConfig:
    """
    一次实验的完整配置，可以完整序列化并写入输出目录
    """
    dataset: DatasetConfig = field(default_factory=lambda: DatasetConfig(synth=SynthConfig()))
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    output_dir: str = "runs/default"
    seed: int = 0

    @property
    def stft(self) -> StftConfig:
        if self.dataset.synth is not None:
            return self.dataset.synth.stft
        return StftConfig()

    def validate(self) -> None:
        if self.dataset.path is None and self.dataset.synth is None:
            raise ConfigError("dataset", "either dataset.path or dataset.synth is required")
        if self.dataset.synth is not None:
            self.dataset.synth.validate()
        self.model.validate()
        self.train.validate()
        self.probe.validate()
        if any(f < 1 for f in self.sweep.factors):
            raise ConfigError("sweep.factors", "downsampling factors must be >= 1")

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "probe": self.probe.to_dict(),
            "sweep": self.sweep.to_dict(),
            "output_dir": self.output_dir,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {"dataset", "model", "train", "probe", "sweep", "output_dir", "seed"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown experiment config field")
        cfg = cls()
        if "dataset" in data:
            cfg.dataset = DatasetConfig.from_dict(data["dataset"])
        if "model" in data:
            cfg.model = ModelConfig.from_dict(data["model"])
        if "train" in data:
            cfg.train = TrainConfig.from_dict(data["train"])
        if "probe" in data:
            cfg.probe = ProbeConfig.from_dict(data["probe"])
        if "sweep" in data:
            cfg.sweep = SweepConfig.from_dict(data["sweep"])
        cfg.output_dir = data.get("output_dir", cfg.output_dir)
        cfg.seed = int(data.get("seed", cfg.seed))
        return cfg

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """把全局种子分发到各子配置"""
        self.seed = seed
        self.train.seed = seed
        self.probe.seed = seed
        self.model.seed = seed
        return self

    def save(self, path: str):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")


def load_config(path: Optional[str]) -> ExperimentConfig:
    """读取 JSON 配置；path 为 None 时返回默认配置"""
    if path is None:
        return ExperimentConfig()
    if not os.path.isfile(path):
        raise ConfigError("config", f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError("config", f"{path} is not valid JSON: {e}") from e
    try:
        return ExperimentConfig.from_dict(data)
    except TypeError as e:
        raise ConfigError("config", str(e)) from e


def resolve_seed(flag: Optional[int], config: ExperimentConfig) -> int:
    """--seed 优先，其次 FGNO_SEED，最后是配置文件中的 seed"""
    if flag is not None:
        return flag
    env = os.getenv(SEED_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(SEED_ENV, f"not an integer: {env!r}") from None
    return config.seed


def resolve_output_dir(flag: Optional[str], config: ExperimentConfig) -> str:
    return flag or os.getenv(OUTPUT_ENV) or config.output_dir


def resolve_cache_dir(output_dir: str) -> str:
    return os.getenv(CACHE_ENV) or os.path.join(output_dir, "caches")
