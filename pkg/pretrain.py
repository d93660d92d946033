"""
自监督预训练：FGNO flow matching 与 MAE 基线

两个训练器都只接收 SpectrogramCorpus，它只暴露谱图网格、不带标签。
同一个 seed 固定数据顺序、s 与 ε 的抽样、掩码和 dropout，损失轨迹逐位可复现。
"""
import csv
import logging
import math
import os
import threading
import time
from dataclasses import asdict, dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from autodiff import Adam, Parameter, Tape, Tensor, clip_grad_norm, matmul, scale, sum_, transpose
from checkpoint import save_checkpoint
from errors import ConfigError, InvalidArgumentError, TrainingDivergedError, shape_mismatch
from flow_matching import (S_MAX, S_MIN, SCHEDULE_KINDS, SIGMA_FLOOR, FlowBatch, VarianceSchedule,
                           fm_loss, make_flow_batch, sample_flow_batch, sample_flow_time)
from flow_model import FlowTransformer
from spectral_transform import NormStats, Spectrogram, normalize_apply

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "epoch", "split", "loss")


@dataclass
class TrainConfig:
    """
    预训练配置

    Args:
        epochs: 训练轮数（0 表示不训练）
        batch_size: 批大小
        learning_rate: Adam 学习率，默认 1e-4
        seed: 随机种子
        schedule: 方差调度（linear / cosine）
        s_min / s_max: flow time 采样区间
        sigma_floor: σ(s) 的下限
        mask_ratio: MAE 掩码比例
        grad_clip: 全局梯度范数上限，<= 0 关闭
        max_steps: 最多训练步数，None 表示不限
        checkpoint_every: 每隔多少步保存一次中间检查点，0 表示只保存最终结果
        log_path: 训练日志 CSV 路径
        checkpoint_dir: 检查点目录
        mae_flow_time: MAE 主干固定使用的 flow time
        progress: 是否显示 tqdm 进度条
    """
    epochs: int = 1
    batch_size: int = 16
    learning_rate: float = 1e-4
    seed: int = 0
    schedule: str = "linear"
    s_min: float = S_MIN
    s_max: float = S_MAX
    sigma_floor: float = SIGMA_FLOOR
    mask_ratio: float = 0.5
    grad_clip: float = 1.0
    max_steps: Optional[int] = None
    checkpoint_every: int = 0
    log_path: Optional[str] = None
    checkpoint_dir: Optional[str] = None
    mae_flow_time: float = 1.0
    progress: bool = False

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError("epochs", "must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate", "must be positive")
        if self.schedule not in SCHEDULE_KINDS:
            raise ConfigError("schedule", f"must be one of {SCHEDULE_KINDS}, got {self.schedule!r}")
        if not 0.0 <= self.s_min < self.s_max <= 1.0:
            raise ConfigError("s_max", "need 0 <= s_min < s_max <= 1")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError("mask_ratio", "must be in (0, 1)")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError("max_steps", "must be >= 0")
        if not 0.0 <= self.mae_flow_time <= 1.0:
            raise ConfigError("mae_flow_time", "must be in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown train config field")
        return cls(**data)


class SpectrogramCorpus:
    """无标签的谱图集合，预训练器只能看到这里的网格"""

    def __init__(self, grids: np.ndarray):
        grids = np.asarray(grids)
        if grids.ndim != 3:
            raise InvalidArgumentError(f"corpus needs grids of shape (N, F, T), got {grids.shape}")
        self._grids = grids

    @classmethod
    def from_spectrograms(cls, spectrograms: Sequence[Spectrogram], stats: Optional[NormStats] = None,
                          dtype=np.float32) -> "SpectrogramCorpus":
        grids = [sg.magnitudes for sg in spectrograms]
        if stats is not None:
            grids = [normalize_apply(g, stats) for g in grids]
        if not grids:
            return cls(np.empty((0, 0, 0), dtype=dtype))
        return cls(np.stack(grids).astype(dtype))

    @property
    def grids(self) -> np.ndarray:
        return self._grids

    def __len__(self) -> int:
        return self._grids.shape[0]


@dataclass
class StepRecord:
    step: int
    epoch: int
    split: str
    loss: float
    wall_clock: float = 0.0


class TrainLog:
    """
    训练记录

    CSV 只写 step, epoch, split, loss 四列，墙钟时间只保留在内存记录中。
    """

    def __init__(self, path: Optional[str] = None):
        self.path = path
        self.records: List[StepRecord] = []
        self._lock = threading.Lock()
        if path:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
            with open(path, "w", newline="", encoding="utf-8") as f:
                csv.writer(f).writerow(LOG_COLUMNS)

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: StepRecord):
        if not math.isfinite(record.loss):
            raise InvalidArgumentError(f"refusing to log non-finite loss at step {record.step}")
        if self.records and record.step < self.records[-1].step:
            raise InvalidArgumentError(f"step {record.step} goes backwards")
        with self._lock:
            self.records.append(record)
            if self.path:
                with open(self.path, "a", newline="", encoding="utf-8") as f:
                    csv.writer(f).writerow([record.step, record.epoch, record.split, repr(record.loss)])

    def losses(self, split: str = "train") -> List[float]:
        return [r.loss for r in self.records if r.split == split]

    def smoothed(self, split: str = "train", window: int = 20) -> np.ndarray:
        """滑动平均后的损失曲线"""
        values = np.asarray(self.losses(split), dtype=np.float64)
        if len(values) == 0:
            return values
        window = max(1, min(window, len(values)))
        return np.convolve(values, np.ones(window) / window, mode="valid")


def read_train_log(path: str) -> List[StepRecord]:
    with open(path, "r", newline="", encoding="utf-8") as f:
        return [StepRecord(int(row["step"]), int(row["epoch"]), row["split"], float(row["loss"]))
                for row in csv.DictReader(f)]


# ---------------------------------------------------------------- 通用训练循环

BatchLoss = Callable[[np.ndarray, np.random.Generator], Tensor]


def _total_steps(num_items: int, config: TrainConfig) -> int:
    total = config.epochs * math.ceil(num_items / config.batch_size)
    return total if config.max_steps is None else min(total, config.max_steps)


def _diagnostic(step: int, epoch: int, config: TrainConfig, phi: np.ndarray) -> dict:
    return {
        "step": step,
        "epoch": epoch,
        "lr": config.learning_rate,
        "batch_size": int(phi.shape[0]),
        "batch_mean": float(np.mean(phi)),
        "batch_std": float(np.std(phi)),
        "batch_max_abs": float(np.max(np.abs(phi))) if phi.size else 0.0,
    }


def _train_loop(name: str, params: List[Parameter], corpus: SpectrogramCorpus, config: TrainConfig,
                batch_loss: BatchLoss, val_loss: Optional[Callable[[], float]],
                set_train: Callable[[bool], None], save: Callable[[str], None]) -> TrainLog:
    log = TrainLog(config.log_path)
    if config.epochs == 0 or config.max_steps == 0:
        return log
    data_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
    optimizer = Adam(params, lr=config.learning_rate)
    total = _total_steps(len(corpus), config)
    step = 0
    set_train(True)
    with tqdm(total=total, desc=name, disable=not config.progress) as bar:
        for epoch in range(config.epochs):
            order = data_rng.permutation(len(corpus))
            for start in range(0, len(corpus), config.batch_size):
                if step >= total:
                    break
                phi = corpus.grids[order[start:start + config.batch_size]]
                with Tape() as tape:
                    loss = batch_loss(phi, data_rng)
                value = loss.item()
                if not math.isfinite(value):
                    diagnostic = _diagnostic(step + 1, epoch, config, phi)
                    logger.error("%s diverged: %s", name, diagnostic)
                    raise TrainingDivergedError(f"{name} loss became {value} at step {step + 1}", diagnostic)
                tape.backward(loss)
                clip_grad_norm(params, config.grad_clip)
                optimizer.step()
                step += 1
                log.append(StepRecord(step, epoch, "train", value, time.time()))
                bar.update(1)
                bar.set_postfix(loss=f"{value:.4f}")
                if config.checkpoint_dir and config.checkpoint_every and step % config.checkpoint_every == 0:
                    save(os.path.join(config.checkpoint_dir, f"step-{step:06d}"))
            if val_loss is not None:
                set_train(False)
                log.append(StepRecord(step, epoch, "val", val_loss(), time.time()))
                set_train(True)
            if step >= total:
                break
    set_train(False)
    if config.checkpoint_dir:
        save(config.checkpoint_dir)
    return log


def _chunked_mean(loss_fn: Callable[[slice], float], n: int, batch_size: int) -> float:
    """按批计算损失并按样本数加权平均"""
    total = 0.0
    for start in range(0, n, batch_size):
        stop = min(n, start + batch_size)
        total += loss_fn(slice(start, stop)) * (stop - start)
    return total / n


# ---------------------------------------------------------------- FGNO

def fixed_validation_batch(val: SpectrogramCorpus, config: TrainConfig) -> Optional[FlowBatch]:
    """为验证集抽一次固定的 (s, ε)，各 epoch 的验证损失因此可比"""
    if val is None or len(val) == 0:
        return None
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    s = sample_flow_time(rng, config.s_min, config.s_max, size=len(val))
    eps = rng.standard_normal(val.grids.shape).astype(val.grids.dtype)
    return make_flow_batch(val.grids, eps, s, VarianceSchedule(config.schedule), config.sigma_floor)


def train_flow(model: FlowTransformer, train: SpectrogramCorpus, val: Optional[SpectrogramCorpus],
               config: TrainConfig, extra: Optional[dict] = None) -> Tuple[FlowTransformer, TrainLog]:
    """
    flow matching 预训练

    每步：取一批 φ，为每个样本采样 s 和 ε，构造 g 与目标 v，计算 fm_loss，反向传播，
    裁剪梯度后做一次 Adam 更新。

    Args:
        model: 待训练的 FlowTransformer
        train / val: 无标签谱图
        config: 训练配置
        extra: 写入检查点 header 的附加信息

    Returns:
        (训练后的模型, 训练日志)
    """
    config.validate()
    if len(train) == 0:
        raise InvalidArgumentError("train_flow needs a non-empty training corpus")
    schedule = VarianceSchedule(config.schedule)
    val_batch = fixed_validation_batch(val, config)
    model.train(seed=int(np.random.SeedSequence([config.seed, 2]).generate_state(1)[0]))

    def batch_loss(phi: np.ndarray, rng: np.random.Generator) -> Tensor:
        batch = sample_flow_batch(phi, rng, schedule, config.s_min, config.s_max, config.sigma_floor)
        return fm_loss(model, batch)

    def val_loss() -> float:
        def chunk(sl: slice) -> float:
            part = FlowBatch(val_batch.phi[sl], val_batch.epsilon[sl], val_batch.s[sl],
                             val_batch.g[sl], val_batch.v[sl])
            return fm_loss(model, part).item()
        return _chunked_mean(chunk, len(val_batch), config.batch_size)

    def set_train(flag: bool):
        model.training = flag

    log = _train_loop("fgno", model.parameters(), train, config, batch_loss,
                      val_loss if val_batch is not None else None, set_train,
                      lambda directory: model.save(directory, extra=extra))
    logger.info("fgno pretraining finished after %d steps", len(log.losses("train")))
    return model, log


# ---------------------------------------------------------------- MAE

def random_mask(sg, ratio: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """
    随机整列掩码

    Args:
        sg: Spectrogram 或 (F, T) 网格
        ratio: 掩码比例，被遮住的列数为 floor(ratio·T + 0.5)
        rng: 随机源

    Returns:
        (掩码后的网格, 同形的 0/1 指示网格，1 表示被遮住)
    """
    if not 0.0 < ratio < 1.0:
        raise InvalidArgumentError(f"mask ratio must be in (0, 1), got {ratio}")
    grid = sg.magnitudes if isinstance(sg, Spectrogram) else np.asarray(sg)
    if grid.ndim != 2:
        raise InvalidArgumentError(f"random_mask expects an (F, T) grid, got {grid.shape}")
    T = grid.shape[1]
    k = int(math.floor(ratio * T + 0.5))
    columns = rng.choice(T, size=k, replace=False)
    mask = np.zeros_like(grid)
    mask[:, columns] = 1
    return np.where(mask == 1, 0, grid).astype(grid.dtype, copy=False), mask


def masked_mse(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """只在被遮住的位置上取均方误差"""
    if pred.shape != target.shape or mask.shape != target.shape:
        raise shape_mismatch("masked_mse", pred.shape, target.shape)
    count = float(mask.sum())
    diff = pred - Tensor(np.asarray(target, dtype=pred.dtype))
    weighted = diff * diff * Tensor(np.asarray(mask, dtype=pred.dtype))
    return scale(sum_(weighted), 1.0 / count if count else 0.0)


class MaskedAutoencoder:
    """
    MAE 基线：共享 FlowTransformer 主干，外加零初始化的线性重建头

    主干固定在 flow_time 下运行；重建头只用于预训练，特征提取不经过它。
    """

    def __init__(self, backbone: FlowTransformer, flow_time: float = 1.0):
        self.backbone = backbone
        self.flow_time = flow_time
        c = backbone.config
        self.head_weight = Parameter(np.zeros((c.d_model, c.freq_bins), dtype=backbone.dtype), name="mae_head.weight")
        self.head_bias = Parameter(np.zeros(c.freq_bins, dtype=backbone.dtype), name="mae_head.bias")

    def parameters(self) -> List[Parameter]:
        return self.backbone.parameters() + [self.head_weight, self.head_bias]

    def reconstruct(self, masked: np.ndarray, train: Optional[bool] = None) -> Tensor:
        """(B, F, T) 掩码输入 → (B, F, T) 重建"""
        hidden = self.backbone.encode(masked, self.flow_time, train=train)
        out = matmul(hidden.layers[-1], self.head_weight) + self.head_bias
        return transpose(out, (0, 2, 1))

    def loss(self, phi: np.ndarray, masked: np.ndarray, mask: np.ndarray, train: Optional[bool] = None) -> Tensor:
        return masked_mse(self.reconstruct(masked, train), phi, mask)

    def extract_features(self, phi, layer: int, s: Optional[float] = None) -> np.ndarray:
        """主干第 layer 层的特征；MAE 主干与 s 无关，始终在 flow_time 下运行"""
        return self.backbone.extract_features(phi, layer, self.flow_time)

    def save(self, directory: str, extra: Optional[dict] = None) -> str:
        c = self.backbone.config
        info = dict(extra or {})
        info["mae_flow_time"] = self.flow_time
        return save_checkpoint(directory, self.parameters(), c.to_dict(), c.config_hash(), kind="mae", extra=info)


def mask_batch(phi: np.ndarray, ratio: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    masked = np.empty_like(phi)
    mask = np.empty_like(phi)
    for i in range(phi.shape[0]):
        masked[i], mask[i] = random_mask(phi[i], ratio, rng)
    return masked, mask


def train_mae(backbone: FlowTransformer, train: SpectrogramCorpus, val: Optional[SpectrogramCorpus],
              config: TrainConfig, extra: Optional[dict] = None) -> Tuple[MaskedAutoencoder, TrainLog]:
    """
    MAE 基线预训练：按 mask_ratio 整列掩码，重建头在被遮住的位置上计算 MSE，端到端训练

    Returns:
        (包含主干与重建头的 MaskedAutoencoder, 训练日志)
    """
    config.validate()
    if len(train) == 0:
        raise InvalidArgumentError("train_mae needs a non-empty training corpus")
    mae = MaskedAutoencoder(backbone, config.mae_flow_time)
    backbone.train(seed=int(np.random.SeedSequence([config.seed, 2]).generate_state(1)[0]))

    val_set = None
    if val is not None and len(val):
        val_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
        val_set = (val.grids,) + mask_batch(val.grids, config.mask_ratio, val_rng)

    def batch_loss(phi: np.ndarray, rng: np.random.Generator) -> Tensor:
        masked, mask = mask_batch(phi, config.mask_ratio, rng)
        return mae.loss(phi, masked, mask)

    def val_loss() -> float:
        phi, masked, mask = val_set
        return _chunked_mean(lambda sl: mae.loss(phi[sl], masked[sl], mask[sl]).item(),
                             len(phi), config.batch_size)

    def set_train(flag: bool):
        backbone.training = flag

    log = _train_loop("mae", mae.parameters(), train, config, batch_loss,
                      val_loss if val_set is not None else None, set_train,
                      lambda directory: mae.save(directory, extra=extra))
    logger.info("mae pretraining finished after %d steps", len(log.losses("train")))
    return mae, log
