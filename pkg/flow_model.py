"""
时间条件 Transformer u(s, g)

token 是谱图的时间帧（每个 token 是一列 F 维幅度），流程为：
线性升维 F→d_model（默认把 s 的正余弦嵌入拼接在升维输入上）→ 加可学习的帧位置编码
→ L 个 pre-norm Transformer 块 → 线性投影 d_model→F。
每个块输出的残差流就是该层的抽头，网络末端不再做 LayerNorm。
"""
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from autodiff import (Parameter, Tensor, concat, dropout, gelu, init_uniform, layer_norm, matmul,
                      reshape, scale, softmax, transpose)
from checkpoint import load_checkpoint, read_header, save_checkpoint
from errors import CheckpointMismatchError, ConfigError, InvalidArgumentError
from flow_matching import FlowTime, VarianceSchedule, interpolate

logger = logging.getLogger(__name__)

TIME_SCALE = 1000.0
TIME_BASE = 10000.0
CONDITIONING = ("concat", "add")


@dataclass
class ModelConfig:
    """
    模型结构配置

    默认值是桌面规模（4 层，d_model=64）；完整规模见 ModelConfig.full_scale()：
    6 层，隐藏维度 768，12 头，前馈 3072，dropout 0.1。

    Args:
        num_layers: Transformer 块数 L
        d_model: 隐藏维度
        num_heads: 注意力头数，需整除 d_model
        d_ff: 前馈层宽度
        dropout: dropout 比例
        freq_bins: 输入频率格数 F
        max_frames: 最大帧数 T
        time_embed_dim: 时间嵌入维度（偶数）
        time_conditioning: concat（拼接在升维输入上）或 add（投影后加到每个 token）
        init_gain: 初始化增益
        seed: 初始化种子
        dtype: 参数精度，训练用 float32，梯度检查用 float64
    """
    num_layers: int = 4
    d_model: int = 64
    num_heads: int = 4
    d_ff: int = 128
    dropout: float = 0.1
    freq_bins: int = 33
    max_frames: int = 32
    time_embed_dim: int = 16
    time_conditioning: str = "concat"
    init_gain: float = 1.0
    seed: int = 0
    dtype: str = "float32"

    @classmethod
    def full_scale(cls, freq_bins: int = 132, max_frames: int = 197) -> "ModelConfig":
        return cls(num_layers=6, d_model=768, num_heads=12, d_ff=3072, dropout=0.1,
                   freq_bins=freq_bins, max_frames=max_frames, time_embed_dim=64)

    def validate(self) -> None:
        if self.num_layers < 1:
            raise ConfigError("num_layers", "must be >= 1")
        if self.d_model < 1 or self.num_heads < 1 or self.d_model % self.num_heads:
            raise ConfigError("num_heads", f"d_model={self.d_model} is not divisible by num_heads={self.num_heads}")
        if self.d_ff < 1:
            raise ConfigError("d_ff", "must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout", "must be in [0, 1)")
        if self.freq_bins < 1 or self.max_frames < 1:
            raise ConfigError("freq_bins", "freq_bins and max_frames must be >= 1")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ConfigError("time_embed_dim", f"must be a positive even number, got {self.time_embed_dim}")
        if self.time_conditioning not in CONDITIONING:
            raise ConfigError("time_conditioning", f"must be one of {CONDITIONING}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype", "must be float32 or float64")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown model config field")
        return cls(**data)

    def config_hash(self) -> str:
        """结构哈希；初始化种子不影响结构，不计入"""
        data = self.to_dict()
        data.pop("seed")
        payload = json.dumps(data, sort_keys=True)
        return hashlib.md5(payload.encode("utf-8")).hexdigest()


def time_embed(s: FlowTime, dim: int, scale_factor: float = TIME_SCALE) -> np.ndarray:
    """
    flow time 的正余弦嵌入

    偶数位是 sin，奇数位是 cos，频率按 10^4 底数几何递减；s 先乘以 scale_factor。

    Returns:
        标量 s 时形状 (dim,)，s 为 (B,) 时形状 (B, dim)
    """
    if dim < 2 or dim % 2:
        raise InvalidArgumentError(f"time embedding dim must be a positive even number, got {dim}")
    s = np.asarray(s, dtype=np.float64)
    if np.any(s < 0.0) or np.any(s > 1.0):
        raise InvalidArgumentError(f"flow time must lie in [0, 1], got {s}")
    freqs = TIME_BASE ** (-np.arange(dim // 2, dtype=np.float64) * 2.0 / dim)
    angles = (s * scale_factor)[..., None] * freqs
    emb = np.empty(angles.shape[:-1] + (dim,), dtype=np.float64)
    emb[..., 0::2] = np.sin(angles)
    emb[..., 1::2] = np.cos(angles)
    return emb


@dataclass
class HiddenStates:
    """各层抽头：第 l 项（从 1 计）是第 l 个块的输出残差流，形状 (T, d_model) 或 (B, T, d_model)"""
    layers: List[Tensor]

    def __len__(self) -> int:
        return len(self.layers)

    def layer(self, l: int) -> np.ndarray:
        if not 1 <= l <= len(self.layers):
            raise InvalidArgumentError(f"layer {l} out of range [1, {len(self.layers)}]")
        return self.layers[l - 1].data


class FlowTransformer:
    """
    u(s, g) 的 Transformer 实现

    训练时由单个线程修改参数；冻结后 forward(train=False) 只读，可以在多个线程中并发调用。
    """

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        self.dtype = np.dtype(config.dtype)
        self.training = False
        self._dropout_rng = np.random.default_rng(config.seed + 1)
        self.params: Dict[str, Parameter] = {}
        self._build(np.random.default_rng(config.seed))

    # ------------------------------------------------------------------ 参数

    def _add(self, name: str, value: np.ndarray) -> Parameter:
        p = Parameter(np.asarray(value, dtype=self.dtype), name=name)
        self.params[name] = p
        return p

    def _linear(self, rng, name: str, fan_in: int, fan_out: int, bias: bool = True):
        self._add(f"{name}.weight", init_uniform(rng, (fan_in, fan_out), fan_in, self.config.init_gain, self.dtype))
        if bias:
            self._add(f"{name}.bias", np.zeros(fan_out))

    def _build(self, rng: np.random.Generator):
        c = self.config
        lift_in = c.freq_bins + c.time_embed_dim if c.time_conditioning == "concat" else c.freq_bins
        self._linear(rng, "lift", lift_in, c.d_model)
        if c.time_conditioning == "add":
            self._linear(rng, "time_proj", c.time_embed_dim, c.d_model)
        self._add("pos_embed", rng.normal(0.0, 0.02, size=(c.max_frames, c.d_model)))
        for l in range(c.num_layers):
            prefix = f"blocks.{l}"
            self._add(f"{prefix}.ln1.gamma", np.ones(c.d_model))
            self._add(f"{prefix}.ln1.beta", np.zeros(c.d_model))
            self._linear(rng, f"{prefix}.attn.q", c.d_model, c.d_model)
            # key 偏置对 softmax 不起作用，不设
            self._linear(rng, f"{prefix}.attn.k", c.d_model, c.d_model, bias=False)
            self._linear(rng, f"{prefix}.attn.v", c.d_model, c.d_model)
            self._linear(rng, f"{prefix}.attn.o", c.d_model, c.d_model)
            self._add(f"{prefix}.ln2.gamma", np.ones(c.d_model))
            self._add(f"{prefix}.ln2.beta", np.zeros(c.d_model))
            self._linear(rng, f"{prefix}.ff1", c.d_model, c.d_ff)
            self._linear(rng, f"{prefix}.ff2", c.d_ff, c.d_model)
        self._linear(rng, "out", c.d_model, c.freq_bins)

    def parameters(self) -> List[Parameter]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def fingerprint(self) -> str:
        """参数数值的 md5，用作特征缓存键的一部分"""
        h = hashlib.md5(self.config.config_hash().encode("utf-8"))
        for name, p in self.params.items():
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def train(self, seed: Optional[int] = None) -> "FlowTransformer":
        self.training = True
        if seed is not None:
            self._dropout_rng = np.random.default_rng(seed)
        return self

    def eval(self) -> "FlowTransformer":
        self.training = False
        return self

    # ------------------------------------------------------------------ 前向

    def _lin(self, x: Tensor, name: str) -> Tensor:
        out = matmul(x, self.params[f"{name}.weight"])
        bias = self.params.get(f"{name}.bias")
        return out + bias if bias is not None else out

    def _attention(self, a: Tensor, prefix: str, train: bool, rng) -> Tensor:
        B, T, D = a.shape
        H = self.config.num_heads
        Dh = D // H

        def heads(t: Tensor) -> Tensor:
            return transpose(reshape(t, (B, T, H, Dh)), (0, 2, 1, 3))

        q = heads(self._lin(a, f"{prefix}.attn.q"))
        k = heads(self._lin(a, f"{prefix}.attn.k"))
        v = heads(self._lin(a, f"{prefix}.attn.v"))
        scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(Dh))
        weights = dropout(softmax(scores, axis=-1), self.config.dropout, train, rng)
        ctx = reshape(transpose(matmul(weights, v), (0, 2, 1, 3)), (B, T, D))
        return self._lin(ctx, f"{prefix}.attn.o")

    def _block(self, h: Tensor, l: int, train: bool, rng) -> Tensor:
        prefix = f"blocks.{l}"
        p = self.params
        rate = self.config.dropout
        a = layer_norm(h, p[f"{prefix}.ln1.gamma"], p[f"{prefix}.ln1.beta"])
        h = h + dropout(self._attention(a, prefix, train, rng), rate, train, rng)
        f = layer_norm(h, p[f"{prefix}.ln2.gamma"], p[f"{prefix}.ln2.beta"])
        f = self._lin(gelu(self._lin(f, f"{prefix}.ff1")), f"{prefix}.ff2")
        return h + dropout(f, rate, train, rng)

    def _prepare(self, x, s) -> Tuple[np.ndarray, np.ndarray, bool]:
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=self.dtype)
        unbatched = x.ndim == 2
        if unbatched:
            x = x[None]
        if x.ndim != 3:
            raise InvalidArgumentError(f"expected input of shape (F, T) or (B, F, T), got {x.shape}")
        _, F, T = x.shape
        if F != self.config.freq_bins:
            raise InvalidArgumentError(
                f"input has {F} frequency bins, model expects {self.config.freq_bins} (shape {x.shape})")
        if not 1 <= T <= self.config.max_frames:
            raise InvalidArgumentError(f"input has {T} frames, model accepts 1..{self.config.max_frames}")
        s = np.asarray(s, dtype=np.float64)
        if s.ndim > 1 or (s.ndim == 1 and s.shape[0] != x.shape[0]):
            raise InvalidArgumentError(f"flow time shape {s.shape} does not match batch of {x.shape[0]}")
        return x, np.broadcast_to(s, (x.shape[0],)), unbatched

    def encode(self, x, s: FlowTime, train: Optional[bool] = None,
               rng: Optional[np.random.Generator] = None) -> HiddenStates:
        """运行到最后一个块为止，返回 (B, T, d_model) 的各层抽头"""
        x, s, _ = self._prepare(x, s)
        return self._encode(x, s, self.training if train is None else train, rng or self._dropout_rng)

    def _encode(self, x: np.ndarray, s: np.ndarray, train: bool, rng) -> HiddenStates:
        c = self.config
        B, F, T = x.shape
        temb = time_embed(s, c.time_embed_dim).astype(self.dtype)
        tokens = Tensor(np.ascontiguousarray(x.transpose(0, 2, 1)))
        if c.time_conditioning == "concat":
            t_tokens = Tensor(np.broadcast_to(temb[:, None, :], (B, T, c.time_embed_dim)))
            h = self._lin(concat([tokens, t_tokens], axis=-1), "lift")
        else:
            h = self._lin(tokens, "lift")
            h = h + reshape(self._lin(Tensor(temb), "time_proj"), (B, 1, c.d_model))
        h = h + self.params["pos_embed"][:T]
        taps = []
        for l in range(c.num_layers):
            h = self._block(h, l, train, rng)
            taps.append(h)
        return HiddenStates(taps)

    def forward(self, x, s: FlowTime, train: Optional[bool] = None,
                rng: Optional[np.random.Generator] = None) -> Tuple[Tensor, HiddenStates]:
        """
        前向计算

        Args:
            x: (F, T) 或 (B, F, T) 的谱图网格
            s: 标量或每个样本一个 flow time
            train: None 时跟随 self.training
            rng: dropout 随机源，None 时用模型自带的

        Returns:
            (与输入同形的速度场, 各层抽头)
        """
        x, s, unbatched = self._prepare(x, s)
        hidden = self._encode(x, s, self.training if train is None else train, rng or self._dropout_rng)
        velocity = transpose(self._lin(hidden.layers[-1], "out"), (0, 2, 1))
        if unbatched:
            B, T, D = hidden.layers[0].shape
            velocity = reshape(velocity, velocity.shape[1:])
            hidden = HiddenStates([reshape(t, (T, D)) for t in hidden.layers])
        return velocity, hidden

    def __call__(self, g, s: FlowTime) -> Tensor:
        return self.forward(g, s)[0]

    # ------------------------------------------------------------------ 特征

    def _check_layer(self, layer: int):
        if not 1 <= layer <= self.config.num_layers:
            raise InvalidArgumentError(f"layer {layer} out of range [1, {self.config.num_layers}]")

    def extract_features(self, phi, layer: int, s: FlowTime) -> np.ndarray:
        """干净输入的第 layer 层特征，评估模式，结果确定"""
        self._check_layer(layer)
        _, hidden = self.forward(phi, s, train=False)
        return hidden.layer(layer).copy()

    def extract_features_noisy(self, phi, layer: int, s: FlowTime, noise_seed,
                               schedule: VarianceSchedule = VarianceSchedule()) -> np.ndarray:
        """先用种子噪声构造 g = s·φ + σ(s)·ε，再取第 layer 层特征"""
        self._check_layer(layer)
        phi = np.asarray(phi, dtype=np.float64)
        eps = np.random.default_rng(noise_seed).standard_normal(phi.shape)
        g = interpolate(phi, eps, s, schedule)
        _, hidden = self.forward(g, s, train=False)
        return hidden.layer(layer).copy()

    # ------------------------------------------------------------------ 检查点

    def save(self, directory: str, extra: Optional[dict] = None) -> str:
        return save_checkpoint(directory, self.parameters(), self.config.to_dict(),
                               self.config.config_hash(), kind="fgno", extra=extra)

    @classmethod
    def load(cls, directory: str, expected: Optional[ModelConfig] = None) -> Tuple["FlowTransformer", dict]:
        """
        从检查点恢复模型

        Args:
            directory: 检查点目录
            expected: 期望的结构配置，哈希不一致时拒绝加载

        Returns:
            (模型, header)
        """
        header = read_header(directory)
        config = ModelConfig.from_dict(header["architecture"])
        if expected is not None and expected.config_hash() != header["config_hash"]:
            raise CheckpointMismatchError(
                f"checkpoint in {directory} was trained with a different model config "
                f"({header['config_hash']} vs {expected.config_hash()})")
        model = cls(config)
        load_checkpoint(directory, model.parameters(), expected_hash=config.config_hash())
        logger.debug("loaded %d parameters from %s", len(model.params), directory)
        return model, header
