"""
连续高斯过程 - 异常类型
"""
import numpy as np


class ContinualGPError(Exception):
    """所有库内异常的基类"""


class ParameterError(ContinualGPError, ValueError):
    """参数错误: 维度不匹配、取值非法、诱导点重合等"""


class NumericalError(ContinualGPError, np.linalg.LinAlgError):
    """数值错误: jitter上限仍无法分解、积分出现非有限值等"""

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class IngestionError(ContinualGPError, ValueError):
    """CSV读取失败, 带行列位置"""

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class ConfigError(ContinualGPError, ValueError):
    """实验配置不合法"""

    def __init__(self, message, key=None):
        super().__init__(message if key is None else f"{key}: {message}")
        self.key = key


class StaleCacheError(ContinualGPError, RuntimeError):
    """连续先验缓存与当前模型不一致"""
