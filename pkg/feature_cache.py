from dotenv import load_dotenv
import os
import hashlib
import logging
import threading
from diskcache import Cache
from typing import Callable, List, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)

load_dotenv()  # 加载环境变量

# 缓存目录：FGNO_CACHE_DIR 优先，否则放在模块目录下的 caches/
DEFAULT_CACHE_DIR = os.getenv('FGNO_CACHE_DIR') or os.path.join(os.path.dirname(__file__), 'caches')

ExtractFn = Callable[[np.ndarray], np.ndarray]


def get_cache_key(fingerprint: str, layer: int, flow_time: float, pooling: str, grid: np.ndarray) -> str:
    """
    为一个谱图在 (模型, 层, flow time, 池化方式) 下的特征生成缓存键
    :param fingerprint: 模型参数指纹
    :param grid: 谱图网格（单通道 (F, T) 或多通道 (C, F, T)）
    :return: 缓存键
    """
    grid = np.ascontiguousarray(grid)
    h = hashlib.md5(f"{fingerprint}|{layer}|{flow_time!r}|{pooling}|{grid.shape}|{grid.dtype}".encode('utf-8'))
    h.update(grid.tobytes())
    return h.hexdigest()


class FeatureCache:
    """
    池化特征的磁盘缓存

    diskcache 自带进程/线程安全，冻结模型并行提取时可以共享同一个实例。
    """

    def __init__(self, directory: Optional[str] = None):
        self.directory = directory or DEFAULT_CACHE_DIR
        self.cache = Cache(self.directory)
        self.hits = 0
        self.misses = 0
        self._stats_lock = threading.Lock()

    def close(self):
        self.cache.close()

    def clear(self):
        self.cache.clear()

    def get_cached_features(self, keys: List[str]) -> Tuple[List[Tuple[int, np.ndarray]], List[int]]:
        """
        从缓存中获取特征，返回已缓存的结果和未缓存的索引
        :param keys: 缓存键列表
        :return: (已缓存的(索引, 特征)列表, 未缓存的索引列表)
        """
        cached_results = []
        uncached = []
        for idx, key in enumerate(keys):
            value = self.cache.get(key)
            if value is not None:
                cached_results.append((idx, value))
            else:
                uncached.append(idx)
        return cached_results, uncached

    def get_features(self, grids: np.ndarray, fingerprint: str, layer: int, flow_time: float,
                     pooling: str, extract: ExtractFn, batch_size: int = 64) -> np.ndarray:
        """
        获取一批谱图的池化特征，支持批次处理和缓存，输出顺序与输入顺序一致
        :param grids: (N, ...) 谱图
        :param extract: 未命中时调用，输入一批谱图，返回 (b, d) 特征
        :return: (N, d) 特征矩阵
        """
        if len(grids) == 0:
            return np.empty((0, 0))
        # 1. 检查缓存并获取未缓存的项
        keys = [get_cache_key(fingerprint, layer, flow_time, pooling, g) for g in grids]
        cached_results, uncached = self.get_cached_features(keys)
        results = list(cached_results)

        # 2. 未缓存的项分批提取并写入缓存
        for i in range(0, len(uncached), batch_size):
            batch_idx = uncached[i:i + batch_size]
            features = extract(grids[batch_idx])
            for idx, feature in zip(batch_idx, features):
                feature = np.asarray(feature)
                self.cache.set(keys[idx], feature)
                results.append((idx, feature))

        with self._stats_lock:
            self.hits += len(cached_results)
            self.misses += len(uncached)
        logger.debug("feature cache: %d hits, %d misses (layer=%d, s=%g)",
                     len(cached_results), len(uncached), layer, flow_time)

        # 3. 按原始顺序排列
        return np.stack([feature for _, feature in sorted(results, key=lambda x: x[0])])
