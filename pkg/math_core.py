"""
连续高斯过程 - 数值核心模块
核函数、带jitter的Cholesky、高斯KL散度、Gauss-Hermite积分
"""
import logging
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy import linalg
from scipy.spatial.distance import cdist

from config import JITTER, QUADRATURE, SYMMETRY_TOL
from errors import NumericalError, ParameterError

logger = logging.getLogger(__name__)

SQRT3 = np.sqrt(3.0)


# ==================== 核函数 ====================

class KernelFamily(Enum):
    RBF = 'rbf'
    MATERN32 = 'matern32'


@dataclass(frozen=True)
class Kernel:
    """各向同性平稳核, 超参数在对数空间优化"""
    family: KernelFamily
    lengthscale: float
    amplitude: float

    def __post_init__(self):
        if not isinstance(self.family, KernelFamily):
            object.__setattr__(self, 'family', KernelFamily(self.family))
        if not (np.isfinite(self.lengthscale) and self.lengthscale > 0):
            raise ParameterError(f"lengthscale必须为正: {self.lengthscale}")
        if not (np.isfinite(self.amplitude) and self.amplitude > 0):
            raise ParameterError(f"amplitude必须为正: {self.amplitude}")

    @property
    def variance(self):
        return self.amplitude ** 2

    @property
    def log_params(self):
        """[log ℓ, log σ_a]"""
        return np.array([np.log(self.lengthscale), np.log(self.amplitude)])

    def with_log_params(self, log_params):
        log_params = np.asarray(log_params, dtype=float)
        return Kernel(self.family, float(np.exp(log_params[0])), float(np.exp(log_params[1])))

    @classmethod
    def from_dict(cls, d):
        return cls(KernelFamily(d.get('family', 'rbf')),
                   float(d['lengthscale']), float(d['amplitude']))

    def to_dict(self):
        return {
            'family': self.family.value,
            'lengthscale': self.lengthscale,
            'amplitude': self.amplitude,
        }


def as_inputs(X):
    """把输入整理成 N×p 矩阵"""
    X = np.asarray(X, dtype=float)
    if X.ndim == 0:
        X = X.reshape(1, 1)
    elif X.ndim == 1:
        X = X[:, None]
    elif X.ndim != 2:
        raise ParameterError(f"输入维度错误: ndim={X.ndim}")
    return X


def _scaled_sqdist(k, X, X2):
    X = as_inputs(X)
    X2 = X if X2 is None else as_inputs(X2)
    if X.shape[1] != X2.shape[1]:
        raise ParameterError(f"输入列数不一致: {X.shape[1]} vs {X2.shape[1]}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(X2))):
        raise ParameterError("输入包含非有限值")
    if X.shape[0] == 0 or X2.shape[0] == 0:
        return np.zeros((X.shape[0], X2.shape[0]))
    return cdist(X, X2, 'sqeuclidean') / k.lengthscale ** 2


def kernel_matrix(k, X, X2=None):
    """计算核矩阵 K(X, X2)"""
    r2 = _scaled_sqdist(k, X, X2)
    if k.family is KernelFamily.RBF:
        return k.variance * np.exp(-0.5 * r2)
    r = np.sqrt(r2)
    return k.variance * (1.0 + SQRT3 * r) * np.exp(-SQRT3 * r)


def kernel_diag(k, X):
    """k(x, x) = σ_a²"""
    return np.full(as_inputs(X).shape[0], k.variance)


def kernel_matrix_grads(k, X, X2=None):
    """
    核矩阵对 (log ℓ, log σ_a) 的导数
    返回: (K, dK_dlog_lengthscale, dK_dlog_amplitude)
    """
    r2 = _scaled_sqdist(k, X, X2)
    if k.family is KernelFamily.RBF:
        K = k.variance * np.exp(-0.5 * r2)
        d_ell = K * r2
    else:
        r = np.sqrt(r2)
        e = np.exp(-SQRT3 * r)
        K = k.variance * (1.0 + SQRT3 * r) * e
        d_ell = 3.0 * k.variance * r2 * e
    return K, d_ell, 2.0 * K


def kernel_diag_grads(k, X):
    """对角线导数: ℓ无关, σ_a 为 2σ_a²"""
    n = as_inputs(X).shape[0]
    return np.zeros(n), np.full(n, 2.0 * k.variance)


# ==================== Cholesky ====================

@dataclass(frozen=True)
class CholeskyFactor:
    """L Lᵀ = A + jitter_used·I"""
    L: np.ndarray
    jitter_used: float

    @property
    def size(self):
        return self.L.shape[0]

    def solve(self, B):
        """A⁻¹ B"""
        return linalg.cho_solve((self.L, True), B, check_finite=False)

    def solve_lower(self, B):
        """L⁻¹ B"""
        return linalg.solve_triangular(self.L, B, lower=True, check_finite=False)

    def inverse(self):
        return self.solve(np.eye(self.size))

    def logdet(self):
        return 2.0 * np.sum(np.log(np.diag(self.L)))


def cholesky_with_jitter(A, base_jitter=None):
    """
    Cholesky分解, 失败时按对角线均值的比例逐级加jitter
    base_jitter: 相对jitter起点 (默认 JITTER['base'])
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ParameterError(f"需要方阵, 得到 {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ParameterError("矩阵包含非有限值")
    scale = max(1.0, np.max(np.abs(A))) if A.size else 1.0
    if A.size and np.max(np.abs(A - A.T)) > SYMMETRY_TOL * scale:
        raise ParameterError("矩阵不对称")
    A = 0.5 * (A + A.T)
    M = A.shape[0]
    if M == 0:
        return CholeskyFactor(np.zeros((0, 0)), 0.0)

    mean_diag = float(np.mean(np.diag(A)))
    diag_scale = mean_diag if mean_diag > 0 else 1.0
    rel = JITTER['base'] if base_jitter is None else float(base_jitter)

    while True:
        jitter = rel * diag_scale
        try:
            L = linalg.cholesky(A + jitter * np.eye(M), lower=True, check_finite=False)
            if np.all(np.diag(L) > 0):
                if jitter > 0:
                    logger.debug(f"Cholesky使用jitter={jitter:.3g} (M={M})")
                return CholeskyFactor(L, jitter)
        except linalg.LinAlgError:
            pass
        rel = max(rel * JITTER['factor'], JITTER['floor'])
        if rel > JITTER['cap'] * (1 + 1e-12):
            cond = float(np.linalg.cond(A))
            logger.warning(f"✗ Cholesky失败: jitter达到上限, cond={cond:.3g}")
            raise NumericalError(f"jitter上限 {JITTER['cap']} 仍无法分解 (cond={cond:.3g})",
                                 condition=cond)


# ==================== 高斯KL ====================

def _kl_core(mu, L, mean1, factor1):
    delta = np.asarray(mu, dtype=float) - np.asarray(mean1, dtype=float)
    M = delta.shape[0]
    Kinv_L = factor1.solve(L)
    alpha = factor1.solve(delta)
    trace = np.sum(L * Kinv_L)
    maha = delta @ alpha
    logdet_S = 2.0 * np.sum(np.log(np.abs(np.diag(L))))
    value = 0.5 * (trace + maha - M + factor1.logdet() - logdet_S)
    return value, delta, alpha, Kinv_L


def gaussian_kl(mu0, S0, mu1, S1):
    """KL( N(mu0,S0) ‖ N(mu1,S1) )"""
    mu0 = np.atleast_1d(np.asarray(mu0, dtype=float))
    mu1 = np.atleast_1d(np.asarray(mu1, dtype=float))
    S0 = np.atleast_2d(np.asarray(S0, dtype=float))
    S1 = np.atleast_2d(np.asarray(S1, dtype=float))
    if not (mu0.shape == mu1.shape and S0.shape == S1.shape == (mu0.size, mu0.size)):
        raise ParameterError("KL参数维度不一致")
    L0 = cholesky_with_jitter(S0).L
    value, _, _, _ = _kl_core(mu0, L0, mu1, cholesky_with_jitter(S1))
    return float(value)


def gaussian_kl_grads(mu, L, mean1, factor1):
    """
    KL( N(mu, LLᵀ) ‖ N(mean1, K) ) 及梯度, K 由 factor1 给出
    返回: (value, d_mu, d_L, d_K)
    """
    value, delta, alpha, Kinv_L = _kl_core(mu, L, mean1, factor1)
    d_mu = alpha
    d_L = np.tril(Kinv_L) - np.diag(1.0 / np.diag(L))
    Kinv = factor1.inverse()
    Kinv_S = Kinv_L @ L.T
    d_K = 0.5 * (Kinv - Kinv_S @ Kinv - np.outer(alpha, alpha))
    return float(value), d_mu, d_L, d_K


# ==================== Gauss-Hermite积分 ====================

@dataclass(frozen=True)
class QuadratureRule:
    """物理学家Hermite节点, 原始权重和为√π"""
    nodes: np.ndarray
    weights: np.ndarray

    @property
    def normalized_weights(self):
        return self.weights / np.sqrt(np.pi)


@lru_cache(maxsize=16)
def hermite_rule(n_nodes=None):
    n = QUADRATURE['nodes'] if n_nodes is None else int(n_nodes)
    if n < 2:
        raise ParameterError(f"积分节点数至少为2: {n}")
    x, w = hermgauss(n)
    x.setflags(write=False)
    w.setflags(write=False)
    return QuadratureRule(x, w)


def gauss_hermite_points(m, v, rule=None):
    """f = m + √(2v)·x, 返回 (f网格, 归一化权重)"""
    rule = rule or hermite_rule()
    m = np.asarray(m, dtype=float)
    v = np.asarray(v, dtype=float)
    if np.any(v < 0):
        raise ParameterError("方差必须非负")
    f = m[..., None] + np.sqrt(2.0 * v)[..., None] * rule.nodes
    return f, rule.normalized_weights


def gauss_hermite_expectation(g, m, v, rule=None):
    """E_{N(f|m,v)}[g(f)], v=0 时直接取 g(m)"""
    m, v = np.broadcast_arrays(np.asarray(m, dtype=float), np.asarray(v, dtype=float))
    f, w = gauss_hermite_points(m, v, rule)
    result = g(f) @ w
    point = v == 0
    if np.any(point):
        result = np.where(point, g(m), result)
    if not np.all(np.isfinite(result)):
        raise NumericalError("积分结果非有限")
    return float(result) if result.ndim == 0 else result
