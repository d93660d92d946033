"""
冻结主干上的特征提取、线性探测头与 (layer, flow time) 网格搜索

选择只看验证集：测试集特征在选出 (l*, s*) 之后才提取。
"""
import csv
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy import linalg
from scipy.special import log_softmax, softmax
from sklearn.preprocessing import StandardScaler

import metrics
from errors import ConfigError, FGNOError, GridCellError, InvalidArgumentError
from feature_cache import FeatureCache
from flow_matching import VarianceSchedule
from flow_model import FlowTransformer

logger = logging.getLogger(__name__)

POOLINGS = ("mean", "max", "last")
HEAD_STD_FLOOR = 1e-8
MIN_HEAD_SAMPLES = 2
DEFAULT_FLOW_TIMES = tuple(k / 9 for k in range(10))


@dataclass
class ProbeConfig:
    """
    探测配置

    Args:
        l2_penalty: L2 正则 λ
        max_iter: 逻辑回归梯度下降的最大迭代数
        tol: 梯度范数收敛阈值
        pooling: mean / max / last
        metric: 网格搜索的选择指标；None 时按验证损失最小化
        layers: 搜索的层，None 表示全部层
        flow_times: 搜索的 flow time，None 表示 {k/9 : k = 0..9}
        label_fraction: 训练集标签使用比例
        seed: 子采样种子
        max_workers: 并行评估网格单元的线程数
        batch_size: 特征提取批大小
    """
    l2_penalty: float = 1e-4
    max_iter: int = 500
    tol: float = 1e-6
    pooling: str = "mean"
    metric: Optional[str] = None
    layers: Optional[List[int]] = None
    flow_times: Optional[List[float]] = None
    label_fraction: float = 1.0
    seed: int = 0
    max_workers: int = 1
    batch_size: int = 64

    def validate(self) -> None:
        if self.l2_penalty < 0:
            raise ConfigError("l2_penalty", "must be non-negative")
        if self.pooling not in POOLINGS:
            raise ConfigError("pooling", f"must be one of {POOLINGS}, got {self.pooling!r}")
        if self.metric is not None and self.metric not in metrics.HIGHER_IS_BETTER:
            raise ConfigError("metric", f"unknown metric {self.metric!r}")
        if not 0.0 < self.label_fraction <= 1.0:
            raise ConfigError("label_fraction", "must be in (0, 1]")
        if self.flow_times is not None and any(not 0.0 <= s <= 1.0 for s in self.flow_times):
            raise ConfigError("flow_times", "flow times must lie in [0, 1]")
        if self.max_workers < 1 or self.batch_size < 1:
            raise ConfigError("max_workers", "max_workers and batch_size must be >= 1")

    def grid(self, num_layers: int) -> Tuple[List[int], List[float]]:
        layers = list(self.layers) if self.layers else list(range(1, num_layers + 1))
        times = list(self.flow_times) if self.flow_times else list(DEFAULT_FLOW_TIMES)
        return layers, times

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ProbeConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown probe config field")
        return cls(**data)


def pool_features(z: np.ndarray, pooling: str = "mean") -> np.ndarray:
    """把 (T, d) 或 (B, T, d) 的 token 特征池化为 (d,) 或 (B, d)"""
    z = np.asarray(z)
    if z.ndim < 2 or z.shape[-2] == 0:
        raise InvalidArgumentError(f"pool_features needs at least one token, got shape {z.shape}")
    if pooling == "mean":
        return z.mean(axis=-2)
    if pooling == "max":
        return z.max(axis=-2)
    if pooling == "last":
        return z[..., -1, :]
    raise InvalidArgumentError(f"unknown pooling {pooling!r}")


# ---------------------------------------------------------------- 探测头

@dataclass
class ProbeHead:
    """
    线性探测头

    features 先经训练集上拟合的 StandardScaler 标准化，再乘 weights 加 bias。
    分类时 weights 为 (d, K)，回归时为 (d, 1)。
    """
    mode: str
    weights: np.ndarray
    bias: np.ndarray
    scaler: StandardScaler
    num_classes: int = 0
    iterations: int = 0

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[0]

    def _standardize(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.feature_dim:
            raise InvalidArgumentError(
                f"probe head expects (N, {self.feature_dim}) features, got {features.shape}")
        return self.scaler.transform(features)

    def decision(self, features: np.ndarray) -> np.ndarray:
        return self._standardize(features) @ self.weights + self.bias

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        if self.mode != "classification":
            raise InvalidArgumentError("predict_proba is only defined for classification heads")
        return softmax(self.decision(features), axis=1)

    def predict(self, features: np.ndarray) -> np.ndarray:
        out = self.decision(features)
        if self.mode == "classification":
            return out.argmax(axis=1)
        return out[:, 0]

    def loss(self, features: np.ndarray, labels: np.ndarray) -> float:
        """验证损失：分类为平均交叉熵，回归为 MSE"""
        out = self.decision(features)
        labels = np.asarray(labels)
        if self.mode == "classification":
            logp = log_softmax(out, axis=1)
            return float(-logp[np.arange(len(labels)), labels.astype(int)].mean())
        return metrics.mse(out[:, 0], labels)


def _fit_scaler(features: np.ndarray) -> StandardScaler:
    """标准差低于 HEAD_STD_FLOOR 的列按 1 处理"""
    scaler = StandardScaler().fit(features)
    scaler.scale_ = np.where(scaler.var_ < HEAD_STD_FLOOR ** 2, 1.0, scaler.scale_)
    return scaler


def _fit_logistic(X: np.ndarray, y: np.ndarray, K: int, config: ProbeConfig) -> Tuple[np.ndarray, np.ndarray, int]:
    """
    全批量梯度下降求解带 L2 的多项逻辑回归

    X 已按列中心化，Hessian 的上界 0.5·[X,1]ᵀ[X,1]/N 在 (W, b) 间分块对角，两块各用自己的 Lipschitz 上界作步长：
    W 为 0.5·‖X‖²/N + λ，不受正则的 b 为 0.5。
    """
    N, D = X.shape
    Y = np.eye(K)[y]
    lam = config.l2_penalty
    step_w = 1.0 / (0.5 * linalg.norm(X, 2) ** 2 / N + lam)
    step_b = 2.0
    W = np.zeros((D, K))
    b = np.zeros(K)
    it = 0
    for it in range(1, config.max_iter + 1):
        residual = (softmax(X @ W + b, axis=1) - Y) / N
        gW = X.T @ residual + lam * W
        gb = residual.sum(axis=0)
        if math.sqrt(float(np.sum(gW * gW) + np.sum(gb * gb))) < config.tol:
            break
        W -= step_w * gW
        b -= step_b * gb
    return W, b, it


def _fit_ridge(X: np.ndarray, y: np.ndarray, lam: float) -> Tuple[np.ndarray, np.ndarray]:
    """闭式岭回归，截距不参与正则"""
    x_mean = X.mean(axis=0)
    y_mean = y.mean()
    Xc = X - x_mean
    A = Xc.T @ Xc + lam * np.eye(X.shape[1])
    rhs = Xc.T @ (y - y_mean)
    try:
        w = linalg.solve(A, rhs, assume_a="pos")
    except (linalg.LinAlgError, ValueError):
        w = linalg.lstsq(A, rhs)[0]
    b = y_mean - x_mean @ w
    return w[:, None], np.array([b])


def fit_head(features: np.ndarray, labels: Sequence, mode: str, config: Optional[ProbeConfig] = None,
             num_classes: Optional[int] = None) -> ProbeHead:
    """
    在冻结特征上训练线性探测头

    Args:
        features: (N, d) 特征
        labels: 类别下标或回归目标
        mode: classification / regression
        config: 探测配置（λ、迭代上限、收敛阈值）
        num_classes: 类别数，缺省时取 max(label) + 1

    Returns:
        ProbeHead
    """
    config = config or ProbeConfig()
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise InvalidArgumentError(f"fit_head: features {X.shape} do not match {y.shape[0]} labels")
    if X.shape[0] < MIN_HEAD_SAMPLES:
        raise InvalidArgumentError(f"fit_head needs at least {MIN_HEAD_SAMPLES} samples")
    scaler = _fit_scaler(X)
    Xs = scaler.transform(X)
    if mode == "classification":
        y = y.astype(int)
        if len(np.unique(y)) < 2:
            raise InvalidArgumentError("fit_head: training labels contain a single class")
        K = num_classes or int(y.max()) + 1
        if y.min() < 0 or y.max() >= K:
            raise InvalidArgumentError(f"fit_head: labels outside [0, {K})")
        W, b, iterations = _fit_logistic(Xs, y, K, config)
        return ProbeHead(mode, W, b, scaler, num_classes=K, iterations=iterations)
    if mode == "regression":
        W, b = _fit_ridge(Xs, y.astype(np.float64), config.l2_penalty)
        return ProbeHead(mode, W, b, scaler)
    raise InvalidArgumentError(f"unknown probe mode {mode!r}")


def evaluate(head: ProbeHead, features: np.ndarray, labels: Sequence, metric: str) -> float:
    """用指定指标给探测头打分"""
    labels = np.asarray(labels)
    if metric == "loss":
        return head.loss(features, labels)
    if head.mode == "classification":
        if metric == "auroc":
            if head.num_classes != 2:
                raise InvalidArgumentError("auroc is defined for binary tasks only")
            return metrics.auroc(head.predict_proba(features)[:, 1], labels)
        pred = head.predict(features)
        if metric == "accuracy":
            return metrics.accuracy(pred, labels)
        if metric == "macro_f1":
            return metrics.macro_f1(pred, labels, head.num_classes)
    else:
        pred = head.predict(features)
        if metric in ("rmse", "mse", "mae"):
            return getattr(metrics, metric)(pred, labels)
    raise InvalidArgumentError(f"metric {metric!r} does not apply to {head.mode}")


def report(head: ProbeHead, features: np.ndarray, labels: Sequence) -> Dict[str, float]:
    """给出该任务适用的全部指标"""
    labels = np.asarray(labels)
    if head.mode == "classification":
        names = ["accuracy", "macro_f1", "loss"]
        if head.num_classes == 2 and len(np.unique(labels)) == 2:
            names.insert(0, "auroc")
    else:
        names = ["rmse", "mse", "mae", "loss"]
    return {name: evaluate(head, features, labels, name) for name in names}


# ---------------------------------------------------------------- 特征提取

@dataclass
class ProbeSplit:
    """一个划分的探测数据：(N, F, T) 或多通道 (N, C, F, T) 谱图与标签"""
    grids: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.grids = np.asarray(self.grids)
        self.labels = np.asarray(self.labels)
        if self.grids.ndim not in (3, 4) or self.grids.shape[0] != self.labels.shape[0]:
            raise InvalidArgumentError(
                f"probe split needs (N, F, T) or (N, C, F, T) grids matching {self.labels.shape[0]} labels, "
                f"got {self.grids.shape}")

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, indices: np.ndarray) -> "ProbeSplit":
        return ProbeSplit(self.grids[indices], self.labels[indices])


class FeatureExtractor(Protocol):
    num_layers: int

    def extract(self, grids: np.ndarray, layer: int, flow_time: float) -> np.ndarray:
        ...


class BackboneExtractor:
    """
    从冻结的 FlowTransformer 提取池化特征

    多通道输入逐通道提取、池化后按通道顺序拼接。noise_seed 给定时改走带噪路径
    （同一批内第 i 个样本使用 noise_seed 与 i 派生的噪声）。
    """

    def __init__(self, model: FlowTransformer, pooling: str = "mean", cache: Optional[FeatureCache] = None,
                 batch_size: int = 64, noise_seed: Optional[int] = None,
                 schedule: VarianceSchedule = VarianceSchedule()):
        if pooling not in POOLINGS:
            raise InvalidArgumentError(f"unknown pooling {pooling!r}")
        self.model = model.eval()
        self.pooling = pooling
        self.cache = cache
        self.batch_size = batch_size
        self.noise_seed = noise_seed
        self.schedule = schedule
        self.num_layers = model.config.num_layers
        self._fingerprint = model.fingerprint() if cache is not None else ""

    def _tag(self) -> str:
        return self.pooling if self.noise_seed is None else f"{self.pooling}|noise={self.noise_seed}"

    def _compute(self, grids: np.ndarray, layer: int, flow_time: float, offset: int = 0) -> np.ndarray:
        if self.noise_seed is None:
            return pool_features(self.model.extract_features(grids, layer, flow_time), self.pooling)
        feats = []
        for i, g in enumerate(grids):
            sample_seed = np.random.SeedSequence([self.noise_seed, offset + i])
            feats.append(self.model.extract_features_noisy(g, layer, flow_time, noise_seed=sample_seed,
                                                           schedule=self.schedule))
        return pool_features(np.stack(feats), self.pooling)

    def _extract_channel(self, grids: np.ndarray, layer: int, flow_time: float) -> np.ndarray:
        if self.cache is None or self.noise_seed is not None:
            parts = [self._compute(grids[i:i + self.batch_size], layer, flow_time, offset=i)
                     for i in range(0, len(grids), self.batch_size)]
            return np.concatenate(parts) if parts else np.empty((0, self.model.config.d_model))
        return self.cache.get_features(grids, self._fingerprint, layer, flow_time, self._tag(),
                                       lambda batch: self._compute(batch, layer, flow_time), self.batch_size)

    def extract(self, grids: np.ndarray, layer: int, flow_time: float) -> np.ndarray:
        grids = np.asarray(grids)
        if grids.ndim == 4:
            return np.concatenate([self._extract_channel(grids[:, c], layer, flow_time)
                                   for c in range(grids.shape[1])], axis=1)
        return self._extract_channel(grids, layer, flow_time)


# ---------------------------------------------------------------- 网格搜索

@dataclass
class GridSearchResult:
    """(layer, flow time) 网格上的验证指标矩阵与选中的单元"""
    layers: List[int]
    flow_times: List[float]
    metric: str
    mode: str
    val_matrix: np.ndarray
    selected_layer: int
    selected_flow_time: float
    test_metrics: Dict[str, float] = field(default_factory=dict)
    train_size: int = 0
    subsample: Optional[dict] = None

    @property
    def selected_index(self) -> Tuple[int, int]:
        return self.layers.index(self.selected_layer), self.flow_times.index(self.selected_flow_time)

    @property
    def best_value(self) -> float:
        i, j = self.selected_index
        return float(self.val_matrix[i, j])

    @property
    def test_matrix(self) -> np.ndarray:
        """只在选中单元填入测试指标，其余为 NaN"""
        out = np.full(self.val_matrix.shape, np.nan)
        if self.metric in self.test_metrics:
            i, j = self.selected_index
            out[i, j] = self.test_metrics[self.metric]
        return out

    def best_per_layer(self) -> List[dict]:
        """每层最优的 flow time 与验证指标"""
        rows = []
        for i, layer in enumerate(self.layers):
            j = _best_index(self.val_matrix[i], self.metric)
            rows.append({"layer": layer, "flow_time": self.flow_times[j], "value": float(self.val_matrix[i, j])})
        return rows

    def to_dict(self) -> dict:
        def clean(matrix):
            return [[None if not np.isfinite(v) else float(v) for v in row] for row in matrix]

        return {
            "layers": list(self.layers),
            "flow_times": [float(s) for s in self.flow_times],
            "metric": self.metric,
            "mode": self.mode,
            "val_matrix": clean(self.val_matrix),
            "test_matrix": clean(self.test_matrix),
            "selected": {"layer": self.selected_layer, "flow_time": float(self.selected_flow_time),
                         "val_value": self.best_value},
            "best_per_layer": self.best_per_layer(),
            "test_metrics": {k: float(v) for k, v in self.test_metrics.items()},
            "train_size": self.train_size,
            "subsample": self.subsample,
        }

    def write_json(self, path: str):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    def write_matrix_csv(self, path: str):
        """行是层，列是 flow time，适合直接画热力图"""
        write_matrix_csv(path, self.layers, self.flow_times, self.val_matrix)


def write_matrix_csv(path: str, layers: Sequence[int], flow_times: Sequence[float], matrix: np.ndarray):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["layer"] + [repr(float(s)) for s in flow_times])
        for layer, row in zip(layers, matrix):
            writer.writerow([layer] + [repr(float(v)) for v in row])


def _best_index(values: Sequence[float], metric: str) -> int:
    """严格更优才替换，并列时保留靠前（更小）的下标；NaN 视为最差"""
    best = None
    for k, v in enumerate(values):
        if not np.isfinite(v):
            continue
        if best is None or metrics.is_better(metric, v, values[best]):
            best = k
    return 0 if best is None else best


def select_cell(layers: Sequence[int], flow_times: Sequence[float], matrix: np.ndarray,
                metric: str) -> Tuple[int, float]:
    """在验证矩阵上选出最优单元；并列时取最小的 l，再取最小的 s"""
    cells = sorted((l, s, i, j) for i, l in enumerate(layers) for j, s in enumerate(flow_times))
    values = [matrix[i, j] for _, _, i, j in cells]
    l, s, _, _ = cells[_best_index(values, metric)]
    return l, s


def _default_metric(config: ProbeConfig) -> str:
    return config.metric or "loss"


def grid_search(extractor: FeatureExtractor, splits: Dict[str, ProbeSplit], layers: Sequence[int],
                flow_times: Sequence[float], mode: str, config: Optional[ProbeConfig] = None,
                num_classes: Optional[int] = None) -> GridSearchResult:
    """
    (layer, flow time) 网格搜索

    对每个单元在 train 上提取干净输入的池化特征并训练探测头，在 val 上打分；
    按验证指标选出最优单元后才提取 test 特征并报告测试指标。

    Args:
        extractor: 特征提取器
        splits: 含 train / val / test 的 ProbeSplit
        layers / flow_times: 网格
        mode: classification / regression
        config: 探测配置
        num_classes: 类别数

    Returns:
        GridSearchResult
    """
    config = config or ProbeConfig()
    config.validate()
    layers = list(layers)
    flow_times = [float(s) for s in flow_times]
    if not layers or not flow_times:
        raise InvalidArgumentError("grid_search needs non-empty layer and flow-time sets")
    missing = [name for name in ("train", "val", "test") if name not in splits]
    if missing:
        raise InvalidArgumentError(f"grid_search is missing splits {missing}")
    metric = _default_metric(config)
    train, val = splits["train"], splits["val"]

    def fit_cell(layer: int, s: float) -> ProbeHead:
        return fit_head(extractor.extract(train.grids, layer, s), train.labels, mode, config, num_classes)

    def score_cell(cell: Tuple[int, int]) -> float:
        i, j = cell
        layer, s = layers[i], flow_times[j]
        try:
            head = fit_cell(layer, s)
            return evaluate(head, extractor.extract(val.grids, layer, s), val.labels, metric)
        except (FGNOError, ValueError, ArithmeticError) as e:
            raise GridCellError(layer, s, e) from e

    cells = [(i, j) for i in range(len(layers)) for j in range(len(flow_times))]
    if config.max_workers > 1:
        with ThreadPoolExecutor(max_workers=config.max_workers) as pool:
            values = list(pool.map(score_cell, cells))
    else:
        values = [score_cell(c) for c in cells]
    matrix = np.empty((len(layers), len(flow_times)))
    for (i, j), v in zip(cells, values):
        matrix[i, j] = v

    best_layer, best_s = select_cell(layers, flow_times, matrix, metric)
    logger.info("grid search selected layer=%d s=%.4f (%s)", best_layer, best_s, metric)

    test = splits["test"]
    try:
        head = fit_cell(best_layer, best_s)
        test_metrics = report(head, extractor.extract(test.grids, best_layer, best_s), test.labels) if len(test) else {}
    except (FGNOError, ValueError, ArithmeticError) as e:
        raise GridCellError(best_layer, best_s, e) from e
    return GridSearchResult(layers, flow_times, metric, mode, matrix, best_layer, best_s,
                            test_metrics=test_metrics, train_size=len(train))


def evaluate_cell(extractor: FeatureExtractor, splits: Dict[str, ProbeSplit], layer: int, flow_time: float,
                  mode: str, metric: str, config: Optional[ProbeConfig] = None,
                  num_classes: Optional[int] = None, split: str = "test") -> float:
    """在固定 (layer, flow time) 上训练探测头并返回 split 上的指标"""
    config = config or ProbeConfig()
    train = splits["train"]
    head = fit_head(extractor.extract(train.grids, layer, flow_time), train.labels, mode, config, num_classes)
    target = splits[split]
    return evaluate(head, extractor.extract(target.grids, layer, flow_time), target.labels, metric)


# ---------------------------------------------------------------- 低标注子采样

@dataclass
class SubsampleReport:
    requested: int
    actual: int
    per_class: Dict[str, int]
    deviation: bool = False
    note: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def _largest_remainder(total: int, counts: np.ndarray) -> np.ndarray:
    exact = total * counts / counts.sum()
    quota = np.floor(exact).astype(int)
    remainder = exact - quota
    # 余数相同时按类别下标
    order = sorted(range(len(counts)), key=lambda c: (-remainder[c], c))
    for c in order[:total - int(quota.sum())]:
        quota[c] += 1
    return quota


def subsample_labels(split: ProbeSplit, fraction: float, seed: int,
                     mode: str = "classification") -> Tuple[ProbeSplit, SubsampleReport]:
    """
    低标注实验的训练集子采样

    分类时按类别分层（最大余数法分配配额），每个出现的类别至少保留 1 个；
    回归时均匀抽样，至少保留 MIN_HEAD_SAMPLES 个。同一个种子结果相同。

    Returns:
        (子集, 子采样报告)
    """
    if not 0.0 < fraction <= 1.0:
        raise InvalidArgumentError(f"label fraction must be in (0, 1], got {fraction}")
    n = len(split)
    if fraction == 1.0:
        return split, SubsampleReport(n, n, _class_counts(split.labels, mode))
    rng = np.random.default_rng(seed)
    requested = int(math.floor(fraction * n + 0.5))
    if mode == "regression":
        k = min(n, max(MIN_HEAD_SAMPLES, requested))
        indices = np.sort(rng.choice(n, size=k, replace=False))
        report_ = SubsampleReport(requested, k, {}, deviation=k != requested,
                                  note=f"raised to {k} samples for the probe head" if k != requested else "")
    else:
        labels = split.labels.astype(int)
        classes, counts = np.unique(labels, return_counts=True)
        total = max(len(classes), requested)
        quota = np.minimum(np.maximum(_largest_remainder(total, counts), 1), counts)
        chosen = []
        for c, q in zip(classes, quota):
            members = np.flatnonzero(labels == c)
            chosen.append(rng.choice(members, size=int(q), replace=False))
        indices = np.sort(np.concatenate(chosen))
        deviation = len(indices) != requested
        report_ = SubsampleReport(requested, len(indices), {str(c): int(q) for c, q in zip(classes, quota)},
                                  deviation=deviation,
                                  note="raised to keep every present class" if deviation else "")
    if report_.deviation:
        logger.warning("subsample: requested %d samples, kept %d (%s)", report_.requested, report_.actual, report_.note)
    return split.subset(indices), report_


def _class_counts(labels: np.ndarray, mode: str) -> Dict[str, int]:
    if mode != "classification":
        return {}
    classes, counts = np.unique(labels.astype(int), return_counts=True)
    return {str(c): int(k) for c, k in zip(classes, counts)}
