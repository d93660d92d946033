"""
Flow matching 基础构件：方差调度、噪声插值、目标速度场、损失与 Euler 积分

插值 g = s·φ + σ(s)·ε，目标场 v = (σ'(s)/σ(s))·(g − s·φ) + φ。
线性调度 σ(s) = 1 − s 下 v 恒等于 φ − ε，与 s 无关。
"""
import math
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from autodiff import Tensor, as_tensor, mse
from errors import InvalidArgumentError, SingularityError, shape_mismatch

SIGMA_FLOOR = 1e-6
S_MIN = 0.0
S_MAX = 0.995
SCHEDULE_KINDS = ("linear", "cosine")

FlowTime = Union[float, np.ndarray]
VelocityField = Callable[[np.ndarray, FlowTime], Union[Tensor, np.ndarray]]


@dataclass(frozen=True)
class VarianceSchedule:
    """单调递减的方差调度，σ(0) = 1，σ(1) = 0"""
    kind: str = "linear"

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise InvalidArgumentError(f"unknown schedule kind {self.kind!r}, expected one of {SCHEDULE_KINDS}")

    def sigma(self, s: FlowTime) -> FlowTime:
        s = np.asarray(s, dtype=np.float64)
        if self.kind == "linear":
            out = 1.0 - s
        else:
            out = np.cos(0.5 * math.pi * s)
            out = np.where(s >= 1.0, 0.0, out)
        return out if out.ndim else float(out)

    def sigma_prime(self, s: FlowTime) -> FlowTime:
        s = np.asarray(s, dtype=np.float64)
        if self.kind == "linear":
            out = np.full_like(s, -1.0)
        else:
            out = -0.5 * math.pi * np.sin(0.5 * math.pi * s)
        return out if out.ndim else float(out)


def _per_sample(s: FlowTime, ndim: int) -> np.ndarray:
    """把标量或 (B,) 的 flow time 调整为能与 ndim 维数据广播的形状"""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim == 0:
        return s
    return s.reshape(s.shape + (1,) * (ndim - s.ndim))


def _check_flow_time(s: FlowTime):
    s = np.asarray(s)
    if np.any(s < 0.0) or np.any(s > 1.0):
        raise InvalidArgumentError(f"flow time must lie in [0, 1], got {s}")


def interpolate(phi: np.ndarray, epsilon: np.ndarray, s: FlowTime,
                schedule: VarianceSchedule = VarianceSchedule()) -> np.ndarray:
    """噪声插值 g = s·φ + σ(s)·ε；s 可以是标量或每个样本一个值"""
    phi = np.asarray(phi)
    epsilon = np.asarray(epsilon)
    if phi.shape != epsilon.shape:
        raise shape_mismatch("interpolate", phi.shape, epsilon.shape)
    _check_flow_time(s)
    s_b = _per_sample(s, phi.ndim)
    sigma = _per_sample(schedule.sigma(s), phi.ndim)
    return (s_b * phi + sigma * epsilon).astype(phi.dtype, copy=False)


def target_field(g: np.ndarray, phi: np.ndarray, s: FlowTime,
                 schedule: VarianceSchedule = VarianceSchedule(),
                 sigma_floor: float = SIGMA_FLOOR) -> np.ndarray:
    """目标速度场 v = (σ'(s)/σ(s))·(g − s·φ) + φ"""
    g = np.asarray(g)
    phi = np.asarray(phi)
    if g.shape != phi.shape:
        raise shape_mismatch("target_field", g.shape, phi.shape)
    sigma = np.asarray(schedule.sigma(s))
    if np.any(sigma <= sigma_floor):
        raise SingularityError(f"sigma(s) <= {sigma_floor} at s={s}; target field is singular")
    s_b = _per_sample(s, phi.ndim)
    ratio = _per_sample(np.asarray(schedule.sigma_prime(s)) / sigma, phi.ndim)
    return (ratio * (g - s_b * phi) + phi).astype(phi.dtype, copy=False)


def sample_flow_time(rng: np.random.Generator, s_min: float = S_MIN, s_max: float = S_MAX,
                     size: Optional[int] = None) -> FlowTime:
    """在 [s_min, s_max] 上均匀采样 flow time"""
    if not 0.0 <= s_min < s_max <= 1.0:
        raise InvalidArgumentError(f"need 0 <= s_min < s_max <= 1, got [{s_min}, {s_max}]")
    return rng.uniform(s_min, s_max, size=size)


@dataclass
class FlowBatch:
    """一批 flow matching 训练样本"""
    phi: np.ndarray
    epsilon: np.ndarray
    s: np.ndarray
    g: np.ndarray
    v: np.ndarray

    def __len__(self) -> int:
        return self.phi.shape[0]


def make_flow_batch(phi: np.ndarray, epsilon: np.ndarray, s: np.ndarray,
                    schedule: VarianceSchedule = VarianceSchedule(),
                    sigma_floor: float = SIGMA_FLOOR) -> FlowBatch:
    """由干净谱图、噪声与 flow time 构造插值与目标场"""
    g = interpolate(phi, epsilon, s, schedule)
    v = target_field(g, phi, s, schedule, sigma_floor)
    return FlowBatch(phi=phi, epsilon=epsilon, s=np.asarray(s, dtype=np.float64), g=g, v=v)


def sample_flow_batch(phi: np.ndarray, rng: np.random.Generator,
                      schedule: VarianceSchedule = VarianceSchedule(),
                      s_min: float = S_MIN, s_max: float = S_MAX,
                      sigma_floor: float = SIGMA_FLOOR) -> FlowBatch:
    """为一批 φ 依次采样 s 与 ε（顺序固定，保证同种子可复现）"""
    s = sample_flow_time(rng, s_min, s_max, size=phi.shape[0])
    epsilon = rng.standard_normal(phi.shape).astype(phi.dtype)
    return make_flow_batch(phi, epsilon, s, schedule, sigma_floor)


def fm_loss(model: VelocityField, batch: FlowBatch) -> Tensor:
    """flow matching 损失：模型预测 u(s, g) 与目标 v 的均方误差"""
    pred = as_tensor(model(batch.g, batch.s))
    return mse(pred, batch.v.astype(pred.dtype, copy=False))


def _field_values(out) -> np.ndarray:
    return out.data if isinstance(out, Tensor) else np.asarray(out)


def euler_integrate(model: VelocityField, g0: np.ndarray, s_start: float, s_end: float,
                    steps: int) -> np.ndarray:
    """
    显式 Euler 积分 dg/ds = u(s, g)

    Args:
        model: 速度场，调用方式 model(g, s)
        g0: 初值
        s_start / s_end: 积分区间
        steps: 步数

    Returns:
        s_end 处的 g
    """
    if steps < 1:
        raise InvalidArgumentError(f"steps must be >= 1, got {steps}")
    if not s_start < s_end:
        raise InvalidArgumentError(f"need s_start < s_end, got [{s_start}, {s_end}]")
    ds = (s_end - s_start) / steps
    g = np.array(g0, copy=True)
    for k in range(steps):
        s = s_start + k * ds
        g = g + ds * _field_values(model(g, s))
    return g


def sample_spectrograms(model: VelocityField, shape, steps: int, rng: np.random.Generator,
                        dtype=np.float32) -> np.ndarray:
    """从标准高斯噪声出发积分到 s = 1，得到生成的（归一化空间）谱图"""
    g0 = rng.standard_normal(shape).astype(dtype)
    return euler_integrate(model, g0, 0.0, 1.0, steps)
