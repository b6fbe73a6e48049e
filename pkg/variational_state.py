"""
连续高斯过程 - 变分状态模块
诱导点、变分分布 q(u)=N(μ, LLᵀ)、后验快照与连续先验重建
"""
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist

from config import COINCIDENCE, INDUCING_PRESETS
from errors import ParameterError
from math_core import (
    as_inputs, cholesky_with_jitter, kernel_diag, kernel_matrix,
)

logger = logging.getLogger(__name__)


# ==================== 数据类型 ====================

@dataclass(frozen=True)
class InducingSet:
    """诱导输入 Z (M×p)"""
    Z: np.ndarray

    def __post_init__(self):
        Z = as_inputs(self.Z).copy()
        if not np.all(np.isfinite(Z)):
            raise ParameterError("诱导点包含非有限值")
        Z.setflags(write=False)
        object.__setattr__(self, 'Z', Z)

    @property
    def M(self):
        return self.Z.shape[0]

    @property
    def p(self):
        return self.Z.shape[1]


@dataclass
class GaussianVariational:
    """q(u) = N(μ, S), S = LLᵀ"""
    mu: np.ndarray
    L: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float).ravel()
        self.L = np.tril(np.atleast_2d(np.asarray(self.L, dtype=float)))
        if self.L.shape != (self.mu.size, self.mu.size):
            raise ParameterError(f"L形状 {self.L.shape} 与 μ 长度 {self.mu.size} 不一致")

    @property
    def M(self):
        return self.mu.size

    @property
    def S(self):
        return self.L @ self.L.T

    @classmethod
    def from_moments(cls, mean, cov):
        return cls(np.array(mean, dtype=float), cholesky_with_jitter(cov).L)

    @staticmethod
    def n_params(M):
        return M + M * (M + 1) // 2

    def pack(self):
        idx = np.tril_indices(self.M)
        return np.concatenate([self.mu, self.L[idx]])

    @classmethod
    def unpack(cls, theta, M):
        theta = np.asarray(theta, dtype=float)
        L = np.zeros((M, M))
        L[np.tril_indices(M)] = theta[M:M + M * (M + 1) // 2]
        return cls(theta[:M].copy(), L)

    def canonical(self):
        """列符号翻转使对角线为正, S不变"""
        signs = np.where(np.diag(self.L) < 0, -1.0, 1.0)
        return GaussianVariational(self.mu.copy(), self.L * signs)


@dataclass(frozen=True)
class PosteriorSnapshot:
    """上一步冻结的 (φ_old, ψ_old, Z_old), 每个隐函数一份"""
    Z: tuple
    q: tuple
    kernels: tuple
    mixing: Optional[np.ndarray] = None
    step: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'Z', tuple(self.Z))
        object.__setattr__(self, 'q', tuple(
            GaussianVariational(qq.mu.copy(), qq.L.copy()) for qq in self.q))
        object.__setattr__(self, 'kernels', tuple(self.kernels))
        if not (len(self.Z) == len(self.q) == len(self.kernels)) or not self.Z:
            raise ParameterError("快照中隐函数数量不一致")
        for Zq, qq in zip(self.Z, self.q):
            if Zq.M != qq.M:
                raise ParameterError(f"快照中诱导点数 {Zq.M} 与 q 维度 {qq.M} 不一致")
        if self.mixing is not None:
            A = np.array(self.mixing, dtype=float)
            if A.ndim != 2 or A.shape[1] != len(self.Z):
                raise ParameterError(f"混合矩阵形状错误: {A.shape}")
            A.setflags(write=False)
            object.__setattr__(self, 'mixing', A)

    @property
    def Q(self):
        return len(self.Z)


@dataclass(frozen=True)
class ContinualPrior:
    """
    新诱导点上的连续先验 q̃(u_*) = N(mean, cov)
    old_prior_factor: ψ_old 下 K(Z_new, Z_new) 的分解, 用于 +KL 项
    """
    mean: np.ndarray
    cov: np.ndarray
    factor: object = field(repr=False)
    old_prior_factor: object = field(repr=False)
    key: tuple = field(repr=False)


def prior_key(snapshot, Z_new, latent=0):
    """连续先验的缓存键, 只依赖快照与 Z_new"""
    return (id(snapshot), snapshot.step, latent, Z_new.Z.tobytes(), Z_new.Z.shape)


# ==================== 诱导点 ====================

GROWTH_RULES = ('constant', 'linear', 'incremental', 'doubling', 'additive')


@dataclass(frozen=True)
class InducingSchedule:
    """
    第t步 (t从1开始) 的诱导点数量
    constant: M | linear: factor·t·M | incremental: M_{t-1} + 2t
    doubling: 2^{t-1}·M | additive: M + increment·⌊(t-1)/every⌋
    per_side=True 时数值表示多维网格每边的点数
    """
    rule: str = 'constant'
    M: int = 3
    factor: int = 1
    increment: int = 1
    every: int = 1
    per_side: bool = False

    def __post_init__(self):
        if self.rule not in GROWTH_RULES:
            raise ParameterError(f"未知的增长规则: {self.rule}")
        if min(self.M, self.factor, self.every) < 1 or self.increment < 0:
            raise ParameterError("M、factor、every 必须 ≥ 1, increment 不能为负")

    @classmethod
    def from_dict(cls, d):
        if isinstance(d, str):
            if d not in INDUCING_PRESETS:
                raise ParameterError(f"未知的诱导点预设: {d}")
            d = INDUCING_PRESETS[d]
        keys = ('rule', 'M', 'factor', 'increment', 'every', 'per_side')
        return cls(**{k: d[k] for k in keys if k in d})

    def to_dict(self):
        return {'rule': self.rule, 'M': self.M, 'factor': self.factor,
                'increment': self.increment, 'every': self.every, 'per_side': self.per_side}

    def _count(self, t):
        if t < 1:
            raise ParameterError(f"步数从1开始: {t}")
        if self.rule == 'constant':
            return self.M
        if self.rule == 'linear':
            return self.factor * t * self.M
        if self.rule == 'incremental':
            return self.M + t * (t + 1) - 2
        if self.rule == 'doubling':
            return self.M * 2 ** (t - 1)
        return self.M + self.increment * ((t - 1) // self.every)

    def size(self, t):
        return self._count(t)

    def per_side_count(self, t):
        return self._count(t) if self.per_side else None


def check_coincidence(Z_old, Z_new, allow_coincident=False):
    """新旧诱导点不允许重合"""
    if Z_old is None or Z_old.M == 0 or Z_new.M == 0:
        return
    if Z_old.p != Z_new.p:
        raise ParameterError(f"诱导点维度不一致: {Z_old.p} vs {Z_new.p}")
    d = cdist(Z_new.Z, Z_old.Z)
    if allow_coincident:
        return
    if np.any(d == 0.0):
        raise ParameterError("新诱导点与旧诱导点重合")
    if np.min(d) < COINCIDENCE['warn_distance']:
        logger.warning(f"[WARN] 新旧诱导点距离过近: {np.min(d):.3g}")


def _grid(lo, hi, per_side):
    axes = [np.linspace(l, h, per_side) if per_side > 1 else np.array([0.5 * (l + h)])
            for l, h in zip(lo, hi)]
    mesh = np.meshgrid(*axes, indexing='ij')
    return np.column_stack([m.ravel() for m in mesh])


def init_inducing(domain_lo, domain_hi, M, Z_old=None, seed=0, per_side=None):
    """
    在 [lo, hi] 上均匀布点并加种子扰动, 直到与 Z_old 不重合
    p>1 时: 给定 per_side 则用每边 per_side 个点的完整网格 (忽略 M);
    否则取覆盖 M 个点的最小网格, 再从中等间隔抽出恰好 M 个
    """
    lo = np.atleast_1d(np.asarray(domain_lo, dtype=float))
    hi = np.atleast_1d(np.asarray(domain_hi, dtype=float))
    if lo.shape != hi.shape or np.any(lo >= hi):
        raise ParameterError(f"区间非法: lo={lo}, hi={hi}")
    if M < 1:
        raise ParameterError(f"M必须≥1: {M}")
    p = lo.size

    if p == 1:
        if M == 1:
            Z = np.array([[0.5 * (lo[0] + hi[0])]])
        else:
            Z = np.linspace(lo[0], hi[0], M)[:, None]
    else:
        if per_side:
            Z = _grid(lo, hi, per_side)
        else:
            side = max(1, int(np.floor(M ** (1.0 / p))))
            while side ** p < M:
                side += 1
            Z = _grid(lo, hi, side)
            Z = Z[np.round(np.linspace(0, len(Z) - 1, M)).astype(int)]

    rng = np.random.default_rng(seed)
    scale = COINCIDENCE['init_jitter'] * (hi - lo)
    Z = Z + rng.uniform(-1.0, 1.0, Z.shape) * scale

    if Z_old is not None and Z_old.M > 0:
        for _ in range(COINCIDENCE['max_retries']):
            close = np.min(cdist(Z, Z_old.Z), axis=1) < COINCIDENCE['warn_distance']
            if not np.any(close):
                break
            Z[close] += rng.uniform(-1.0, 1.0, (int(close.sum()), p)) * scale
        else:
            raise ParameterError("无法生成与旧诱导点不重合的新诱导点")
    return InducingSet(Z)


# ==================== 投影: q(u) → q(f) ====================

class LatentProjection:
    """
    在固定 (核, Z, X) 下把 q(u) 投影到 q(f) 的逐点边缘分布
    forward 计算 (m, v), backward 把 (dm, dv) 反传到 μ、L 与核矩阵
    """

    def __init__(self, kernel, Z, X, Kuu_factor=None):
        self.kernel = kernel
        self.Z = Z
        self.X = as_inputs(X)
        Zm = Z.Z if isinstance(Z, InducingSet) else as_inputs(Z)
        self.Kuu = kernel_matrix(kernel, Zm)
        self.factor = Kuu_factor or cholesky_with_jitter(self.Kuu)
        self.Kfu = kernel_matrix(kernel, self.X, Zm)
        self.kff = kernel_diag(kernel, self.X)
        # A = Kfu Kuu⁻¹
        self.A = self.factor.solve(self.Kfu.T).T
        self._cache = None

    def forward(self, mu, L):
        S = L @ L.T
        AS = self.A @ S
        alpha = self.factor.solve(mu)
        m = self.Kfu @ alpha
        v = self.kff - np.sum(self.A * self.Kfu, axis=1) + np.sum(AS * self.A, axis=1)
        self._cache = (L, S, AS, alpha)
        return m, v

    def backward(self, dm, dv):
        """返回 (d_mu, d_L, d_Kfu, d_Kuu, d_kff)"""
        L, S, AS, alpha = self._cache
        A = self.A
        d_mu = A.T @ dm
        dS = A.T @ (dv[:, None] * A)
        d_L = np.tril(2.0 * dS @ L)
        Kinv_S = self.factor.solve(S)
        d_Kfu = np.outer(dm, alpha) + 2.0 * dv[:, None] * self.factor.solve((AS - self.Kfu).T).T
        d_Kuu = -np.outer(d_mu, alpha) - dS @ Kinv_S.T - Kinv_S @ dS + dS
        return d_mu, d_L, d_Kfu, d_Kuu, dv


def marginal_posterior(q, Z, X, kernel):
    """q(f) 的逐点均值与方差 (方差截断为非负)"""
    X = as_inputs(X)
    if X.shape[1] != Z.p:
        raise ParameterError(f"输入维度 {X.shape[1]} 与诱导点维度 {Z.p} 不一致")
    if q.M != Z.M:
        raise ParameterError(f"q 维度 {q.M} 与诱导点数 {Z.M} 不一致")
    m, v = LatentProjection(kernel, Z, X).forward(q.mu, q.L)
    return m, np.maximum(v, 0.0)


# ==================== 连续先验 ====================

def reconstruct_continual_prior(snapshot, Z_new, kernel=None, latent=0, allow_coincident=False):
    """
    用旧后验与旧超参数在 Z_new 上重建先验:
    mean = K*u Kuu⁻¹ μ_old
    cov  = K** + K*u Kuu⁻¹ (S_old − Kuu) Kuu⁻¹ Ku*
    """
    Z_old = snapshot.Z[latent]
    q_old = snapshot.q[latent]
    k_old = kernel or snapshot.kernels[latent]
    check_coincidence(Z_old, Z_new, allow_coincident)

    proj = LatentProjection(k_old, Z_old, Z_new.Z)
    A = proj.A
    mean = A @ q_old.mu
    Kss = kernel_matrix(k_old, Z_new.Z)
    cov = Kss - A @ proj.Kfu.T + A @ q_old.S @ A.T
    cov = 0.5 * (cov + cov.T)

    return ContinualPrior(
        mean=mean,
        cov=cov,
        factor=cholesky_with_jitter(cov),
        old_prior_factor=cholesky_with_jitter(Kss),
        key=prior_key(snapshot, Z_new, latent),
    )
