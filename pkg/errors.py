"""FGNO 流水线中使用的异常类型"""
from typing import Any, Dict, Optional


class FGNOError(Exception):
    """所有 FGNO 异常的基类"""


class InvalidArgumentError(FGNOError, ValueError):
    """参数不合法（形状不匹配、越界、空输入等）"""


class SingularityError(FGNOError, ArithmeticError):
    """方差调度在 flow time 处退化（sigma 低于下限）"""


class ConfigError(InvalidArgumentError):
    """配置错误，field 指出出错的字段"""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class TrainingDivergedError(FGNOError, RuntimeError):
    """训练过程中出现非有限损失"""

    def __init__(self, message: str, diagnostic: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostic = diagnostic or {}


class CheckpointMismatchError(FGNOError):
    """检查点与当前模型配置不匹配"""


class GridCellError(FGNOError):
    """网格搜索中某个 (layer, flow_time) 单元失败"""

    def __init__(self, layer: int, flow_time: float, cause: BaseException):
        super().__init__(f"grid cell (layer={layer}, s={flow_time:g}) failed: {cause}")
        self.layer = layer
        self.flow_time = flow_time


def shape_mismatch(op: str, a, b) -> InvalidArgumentError:
    """构造带两个形状的形状不匹配错误"""
    return InvalidArgumentError(f"{op}: shape mismatch {tuple(a)} vs {tuple(b)}")
