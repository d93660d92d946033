"""探测评估指标"""
import math
from typing import Sequence

import numpy as np
from scipy.stats import rankdata
from sklearn.metrics import accuracy_score, f1_score, mean_absolute_error, mean_squared_error

from errors import InvalidArgumentError

# 越大越好的指标；其余（rmse/mse/mae/loss）越小越好
HIGHER_IS_BETTER = {"auroc": True, "accuracy": True, "macro_f1": True,
                    "rmse": False, "mse": False, "mae": False, "loss": False}


def _pair(a: Sequence, b: Sequence, name: str):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape[0] != b.shape[0]:
        raise InvalidArgumentError(f"{name}: length mismatch {a.shape[0]} vs {b.shape[0]}")
    if a.shape[0] == 0:
        raise InvalidArgumentError(f"{name}: empty input")
    return a, b


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """
    秩形式的 AUROC：随机正样本得分高于随机负样本的概率，并列计 1/2

    Args:
        scores: 正类得分
        labels: 0/1 标签
    """
    scores, labels = _pair(scores, labels, "auroc")
    positive = labels == 1
    n_pos = int(positive.sum())
    n_neg = int((labels == 0).sum())
    if n_pos + n_neg != len(labels):
        raise InvalidArgumentError("auroc: labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise InvalidArgumentError("auroc: both classes must be present")
    ranks = rankdata(scores, method="average")
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def accuracy(pred: Sequence[int], labels: Sequence[int]) -> float:
    pred, labels = _pair(pred, labels, "accuracy")
    return float(accuracy_score(labels, pred))


def macro_f1(pred: Sequence[int], labels: Sequence[int], num_classes: int) -> float:
    """各类 F1 的算术平均；预测和标签中都不出现的类 F1 记为 0"""
    pred, labels = _pair(pred, labels, "macro_f1")
    if num_classes < 2:
        raise InvalidArgumentError(f"macro_f1 needs num_classes >= 2, got {num_classes}")
    return float(f1_score(labels, pred, labels=list(range(num_classes)), average="macro", zero_division=0))


def mse(pred: Sequence[float], target: Sequence[float]) -> float:
    pred, target = _pair(pred, target, "mse")
    return float(mean_squared_error(target, pred))


def rmse(pred: Sequence[float], target: Sequence[float]) -> float:
    return math.sqrt(mse(pred, target))


def mae(pred: Sequence[float], target: Sequence[float]) -> float:
    pred, target = _pair(pred, target, "mae")
    return float(mean_absolute_error(target, pred))


def is_better(metric: str, candidate: float, incumbent: float) -> bool:
    """candidate 是否严格优于 incumbent"""
    if metric not in HIGHER_IS_BETTER:
        raise InvalidArgumentError(f"unknown metric {metric!r}")
    return candidate > incumbent if HIGHER_IS_BETTER[metric] else candidate < incumbent
