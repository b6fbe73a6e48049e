"""
连续高斯过程 - 似然模块
高斯(固定噪声)、伯努利(logistic)、泊松(exp) 的变分期望与蒙特卡洛预测密度
"""
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import expit, gammaln, logsumexp

from config import METRICS
from errors import NumericalError, ParameterError
from math_core import gauss_hermite_points, hermite_rule

# 小于此值的方差用 Price 公式求 dv, 避免 1/√v
_SMALL_VARIANCE = 1e-10


class LikelihoodFamily(Enum):
    GAUSSIAN = 'gaussian'
    BERNOULLI = 'bernoulli'
    POISSON = 'poisson'


@dataclass(frozen=True)
class LikelihoodSpec:
    """单通道似然, 高斯噪声固定不优化"""
    family: LikelihoodFamily
    noise_std: float = None

    def __post_init__(self):
        if not isinstance(self.family, LikelihoodFamily):
            object.__setattr__(self, 'family', LikelihoodFamily(self.family))
        if self.family is LikelihoodFamily.GAUSSIAN:
            if self.noise_std is None or not np.isfinite(self.noise_std) or self.noise_std <= 0:
                raise ParameterError(f"高斯似然需要正的噪声标准差: {self.noise_std}")
        elif self.noise_std is not None:
            raise ParameterError(f"{self.family.value} 似然不接受 noise_std")

    @classmethod
    def gaussian(cls, noise_std):
        return cls(LikelihoodFamily.GAUSSIAN, float(noise_std))

    @classmethod
    def bernoulli(cls):
        return cls(LikelihoodFamily.BERNOULLI)

    @classmethod
    def poisson(cls):
        return cls(LikelihoodFamily.POISSON)

    @classmethod
    def from_dict(cls, d):
        family = LikelihoodFamily(d['family'])
        if family is LikelihoodFamily.GAUSSIAN:
            return cls.gaussian(d['sigma'])
        return cls(family)

    def to_dict(self):
        d = {'family': self.family.value}
        if self.noise_std is not None:
            d['sigma'] = self.noise_std
        return d

    @property
    def is_classification(self):
        return self.family is LikelihoodFamily.BERNOULLI


@dataclass(frozen=True)
class HeterogeneousModel:
    """每个输出通道一个似然"""
    per_channel: tuple

    def __post_init__(self):
        object.__setattr__(self, 'per_channel', tuple(self.per_channel))
        if not self.per_channel:
            raise ParameterError("至少需要一个通道")

    def __len__(self):
        return len(self.per_channel)

    def __getitem__(self, d):
        return self.per_channel[d]

    def __iter__(self):
        return iter(self.per_channel)

    def check_channels(self, D):
        if len(self.per_channel) != D:
            raise ParameterError(f"似然数量 {len(self.per_channel)} 与输出维度 {D} 不一致")


# ==================== 逐点对数密度 ====================

def check_outputs(spec, y):
    """检查观测值是否属于该似然的取值范围"""
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise ParameterError("观测值包含非有限值")
    if spec.family is LikelihoodFamily.BERNOULLI and not np.all((y == 0) | (y == 1)):
        raise ParameterError("伯努利观测必须为0或1")
    if spec.family is LikelihoodFamily.POISSON and not np.all((y >= 0) & (y == np.round(y))):
        raise ParameterError("泊松观测必须为非负整数")
    return y


def log_density(spec, y, f):
    """log p(y|f)"""
    if spec.family is LikelihoodFamily.GAUSSIAN:
        s2 = spec.noise_std ** 2
        return -0.5 * np.log(2 * np.pi * s2) - 0.5 * (y - f) ** 2 / s2
    if spec.family is LikelihoodFamily.BERNOULLI:
        return y * f - np.logaddexp(0.0, f)
    return y * f - np.exp(f) - gammaln(y + 1.0)


def log_density_derivatives(spec, y, f):
    """对 f 的一阶、二阶导数"""
    if spec.family is LikelihoodFamily.GAUSSIAN:
        s2 = spec.noise_std ** 2
        return (y - f) / s2, np.full(np.shape(f), -1.0 / s2)
    if spec.family is LikelihoodFamily.BERNOULLI:
        p = expit(f)
        return y - p, -p * (1.0 - p)
    rate = np.exp(f)
    return y - rate, -rate


# ==================== 变分期望 ====================

def poisson_expectation_closed_form(y, m, v):
    """泊松期望的解析形式 y·m − e^{m+v/2} − log y!"""
    y, m, v = (np.asarray(a, dtype=float) for a in (y, m, v))
    rate = np.exp(m + 0.5 * v)
    return y * m - rate - gammaln(y + 1.0), y - rate, -0.5 * rate


def variational_expectation(spec, y, m, v, rule=None):
    """
    E_{N(f|m,v)}[log p(y|f)] 及对 m, v 的偏导
    返回: (value, dm, dv), 形状与输入广播一致
    """
    y = check_outputs(spec, y)
    y, m, v = np.broadcast_arrays(y, np.asarray(m, dtype=float), np.asarray(v, dtype=float))
    if np.any(v < 0):
        raise ParameterError("方差必须非负")

    if spec.family is LikelihoodFamily.GAUSSIAN:
        s2 = spec.noise_std ** 2
        value = -0.5 * np.log(2 * np.pi * s2) - 0.5 * ((y - m) ** 2 + v) / s2
        return value, (y - m) / s2, np.full(np.shape(m), -0.5 / s2)

    rule = rule or hermite_rule()
    f, w = gauss_hermite_points(m, v, rule)
    yy = y[..., None]
    value = log_density(spec, yy, f) @ w
    g1, g2 = log_density_derivatives(spec, yy, f)
    dm = g1 @ w

    # dv: v较大时对积分公式链式求导, 否则用 ½E[g'']
    small = v < _SMALL_VARIANCE
    safe_v = np.where(small, 1.0, v)
    dv_chain = (g1 * rule.nodes) @ w / np.sqrt(2.0 * safe_v)
    dv = np.where(small, 0.5 * (g2 @ w), dv_chain)

    point = v == 0
    if np.any(point):
        g0 = log_density(spec, y, m)
        d1, _ = log_density_derivatives(spec, y, m)
        value = np.where(point, g0, value)
        dm = np.where(point, d1, dm)

    if not (np.all(np.isfinite(value)) and np.all(np.isfinite(dm)) and np.all(np.isfinite(dv))):
        raise NumericalError("变分期望出现非有限值")
    return value, dm, dv


# ==================== 预测 ====================

def predictive_mean(spec, m, v, rule=None):
    """预测分布下 E[y]: 伯努利为正类概率"""
    m = np.asarray(m, dtype=float)
    v = np.asarray(v, dtype=float)
    if spec.family is LikelihoodFamily.GAUSSIAN:
        return m
    if spec.family is LikelihoodFamily.POISSON:
        return np.exp(m + 0.5 * v)
    f, w = gauss_hermite_points(m, np.maximum(v, 0.0), rule)
    return expit(f) @ w


def log_predictive_density_mc(spec, y, m, v, n_samples=None, seed=0):
    """log[(1/S) Σ_s p(y|f_s)], f_s ~ N(m, v)"""
    S = METRICS['nlpd_samples'] if n_samples is None else int(n_samples)
    if S < 1:
        raise ParameterError(f"n_samples必须≥1: {S}")
    y, m, v = np.broadcast_arrays(np.asarray(y, dtype=float),
                                  np.asarray(m, dtype=float),
                                  np.maximum(np.asarray(v, dtype=float), 0.0))
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal(y.shape + (S,))
    f = m[..., None] + np.sqrt(v)[..., None] * eps
    logp = log_density(spec, y[..., None], f)
    out = logsumexp(logp, axis=-1) - np.log(S)
    return float(out) if out.ndim == 0 else out


def predictive_density_mc(spec, y, m, v, n_samples=None, seed=0):
    """(1/S) Σ_s p(y|f_s), 由seed确定"""
    return np.exp(log_predictive_density_mc(spec, y, m, v, n_samples, seed))


def error_rate(spec, predictions, labels, threshold=None):
    """分类错误率: p ≥ 阈值 判为1, 只用于伯努利通道"""
    if spec.family is not LikelihoodFamily.BERNOULLI:
        raise ParameterError(f"错误率只适用于伯努利似然: {spec.family.value}")
    p = np.asarray(predictions, dtype=float).ravel()
    labels = np.asarray(labels, dtype=float).ravel()
    if p.size == 0:
        raise ParameterError("空输入")
    if p.size != labels.size:
        raise ParameterError(f"长度不一致: {p.size} vs {labels.size}")
    thr = METRICS['class_threshold'] if threshold is None else threshold
    return float(np.mean((p >= thr).astype(float) != labels))
