"""
连续高斯过程 - 多输出模型 (LMC)
f_d = Σ_q a_{d,q} u_q, 每个隐函数一套诱导点与连续先验, 支持异构似然与通道缺失
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.linalg import block_diag

from config import VARIANCE_FLOOR
from errors import NumericalError, ParameterError, StaleCacheError
from likelihoods import HeterogeneousModel, check_outputs, variational_expectation
from math_core import as_inputs, cholesky_with_jitter, kernel_matrix
from optimize import maximize, vem_loop
from sogp import BoundValue, FitInfo, kernel_hyper_grads, latent_kl_terms
from variational_state import (
    GaussianVariational, LatentProjection, PosteriorSnapshot, init_inducing,
    marginal_posterior, prior_key, reconstruct_continual_prior,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LMCMixing:
    """混合系数 A (D×Q), B_q = a_q a_qᵀ 为秩一矩阵"""
    A: np.ndarray

    def __post_init__(self):
        A = np.array(self.A, dtype=float)
        if A.ndim != 2 or not np.all(np.isfinite(A)):
            raise ParameterError(f"混合矩阵必须是有限的二维数组: {A.shape}")
        A.setflags(write=False)
        object.__setattr__(self, 'A', A)

    @property
    def D(self):
        return self.A.shape[0]

    @property
    def Q(self):
        return self.A.shape[1]

    def coregionalization(self, q):
        return np.outer(self.A[:, q], self.A[:, q])


@dataclass
class MultiOutputModel:
    kernels: list
    mixing: LMCMixing
    likelihoods: HeterogeneousModel
    Z: Optional[list] = None
    q: Optional[list] = None
    snapshot: Optional[PosteriorSnapshot] = None
    priors: Optional[list] = None
    domain: Optional[tuple] = None
    steps_done: int = 0
    last_fit: Optional[FitInfo] = None

    def __post_init__(self):
        self.kernels = list(self.kernels)
        if len(self.kernels) != self.mixing.Q:
            raise ParameterError(f"核数量 {len(self.kernels)} 与 Q={self.mixing.Q} 不一致")
        self.likelihoods.check_channels(self.mixing.D)

    @property
    def D(self):
        return self.mixing.D

    @property
    def Q(self):
        return self.mixing.Q

    @property
    def trained(self):
        return self.q is not None

    @property
    def n_inducing(self):
        return sum(Zq.M for Zq in self.Z) if self.Z else 0

    def freeze(self):
        if not self.trained:
            raise ParameterError("模型尚未训练, 无法生成快照")
        return PosteriorSnapshot(Z=tuple(self.Z), q=tuple(self.q), kernels=tuple(self.kernels),
                                 mixing=self.mixing.A, step=self.steps_done)

    @classmethod
    def from_snapshot(cls, snapshot, likelihoods, domain, steps_done):
        return cls(kernels=list(snapshot.kernels), mixing=LMCMixing(snapshot.mixing),
                   likelihoods=likelihoods, Z=list(snapshot.Z), q=list(snapshot.q),
                   domain=domain, steps_done=steps_done)

    def refresh_priors(self):
        if self.snapshot is None:
            self.priors = None
            return None
        keys = [prior_key(self.snapshot, Zq, i) for i, Zq in enumerate(self.Z)]
        if self.priors is None or [p.key for p in self.priors] != keys:
            self.priors = [reconstruct_continual_prior(self.snapshot, Zq, latent=i)
                           for i, Zq in enumerate(self.Z)]
        return self.priors


# ==================== 协方差 ====================

def cross_cov_f_u(mixing, kernels, d, X, Z_list):
    """K_{f_d u} = [a_{d,1} K_1(X, Z_1), ..., a_{d,Q} K_Q(X, Z_Q)]"""
    if not 0 <= d < mixing.D:
        raise ParameterError(f"通道下标越界: {d}")
    if not (len(kernels) == len(Z_list) == mixing.Q):
        raise ParameterError("核、诱导点数量与 Q 不一致")
    X = as_inputs(X)
    return np.hstack([mixing.A[d, i] * kernel_matrix(k, X, Zq.Z)
                      for i, (k, Zq) in enumerate(zip(kernels, Z_list))])


def assemble_kuu(kernels, Z_list):
    """块对角 Kuu, 隐函数之间互不相关"""
    return block_diag(*[kernel_matrix(k, Zq.Z) for k, Zq in zip(kernels, Z_list)])


# ==================== 批数据 ====================

def _channel_data(model, batch):
    Xs, ys = [], []
    for d in range(model.D):
        X = batch.X[d] if d < len(batch.X) else None
        y = batch.y[d] if d < len(batch.y) else None
        if X is None or len(X) == 0:
            Xs.append(None)
            ys.append(None)
            continue
        X = as_inputs(X)
        y = np.asarray(y, dtype=float).ravel()
        if X.shape[0] != y.size:
            raise ParameterError(f"通道{d}: X 行数 {X.shape[0]} 与 y 长度 {y.size} 不一致")
        Xs.append(X)
        ys.append(y)
    if all(X is None for X in Xs):
        raise ParameterError("所有通道都为空")
    return Xs, ys


# ==================== 下界 ====================

def _bound_multi(model, Xs, ys, priors, scale=1.0):
    A = model.mixing.A
    Q = model.Q
    factors = [cholesky_with_jitter(kernel_matrix(k, Zq.Z)) for k, Zq in zip(model.kernels, model.Z)]
    d_mu = [np.zeros(qq.M) for qq in model.q]
    d_L = [np.zeros((qq.M, qq.M)) for qq in model.q]
    d_Kuu = [np.zeros((qq.M, qq.M)) for qq in model.q]
    hyper = np.zeros((Q, 2))
    d_A = np.zeros_like(A)
    per_channel = []

    for d, (X, y) in enumerate(zip(Xs, ys)):
        if X is None:
            per_channel.append(0.0)
            continue
        projs = [LatentProjection(model.kernels[i], model.Z[i], X, factors[i]) for i in range(Q)]
        moments = [p.forward(qq.mu, qq.L) for p, qq in zip(projs, model.q)]
        m_d = np.zeros(X.shape[0])
        v_d = np.zeros(X.shape[0])
        for i, (m_q, v_q) in enumerate(moments):
            m_d = m_d + A[d, i] * m_q
            v_d = v_d + A[d, i] ** 2 * v_q
        floored = v_d < VARIANCE_FLOOR
        ve, dm, dv = variational_expectation(model.likelihoods[d], y, m_d,
                                             np.maximum(v_d, VARIANCE_FLOOR))
        dv = np.where(floored, 0.0, dv)
        per_channel.append(scale * float(np.sum(ve)))
        dm = scale * dm
        dv = scale * dv
        for i, (m_q, v_q) in enumerate(moments):
            d_A[d, i] = dm @ m_q + 2.0 * A[d, i] * (dv @ v_q)
            g_mu, g_L, g_Kfu, g_Kuu, g_kff = projs[i].backward(A[d, i] * dm, A[d, i] ** 2 * dv)
            d_mu[i] += g_mu
            d_L[i] += g_L
            d_Kuu[i] += g_Kuu
            hyper[i] += kernel_hyper_grads(model.kernels[i], model.Z[i], X, g_Kfu,
                                           np.zeros_like(g_Kuu), g_kff)

    terms = {'expectation': float(sum(per_channel)), 'expectation_per_channel': per_channel,
             'kl_new': 0.0, 'kl_old': 0.0, 'kl_continual': 0.0}
    for i, qq in enumerate(model.q):
        kl, k_mu, k_L, k_Kuu = latent_kl_terms(qq, factors[i], priors[i] if priors else None)
        for key in ('kl_new', 'kl_old', 'kl_continual'):
            terms[key] += kl[key]
        d_mu[i] += k_mu
        d_L[i] += k_L
        hyper[i] += kernel_hyper_grads(model.kernels[i], model.Z[i], None, None,
                                       d_Kuu[i] + k_Kuu, None)

    value = terms['expectation'] - terms['kl_new'] + terms['kl_old'] - terms['kl_continual']
    grads = {'mu': d_mu, 'L': d_L, 'log_lengthscale': hyper[:, 0],
             'log_amplitude': hyper[:, 1], 'mixing': d_A}
    return BoundValue(value, terms, grads)


def _valid_priors(model):
    if model.snapshot is None:
        return None
    keys = [prior_key(model.snapshot, Zq, i) for i, Zq in enumerate(model.Z)]
    if model.priors is None or [p.key for p in model.priors] != keys:
        raise StaleCacheError("连续先验缓存与当前快照/诱导点不一致")
    return model.priors


def elbo_multi(model, batch, scale=1.0):
    """
    Σ_d Σ_n E[log p(y_dn|f_dn)] − Σ_q KL[q_q‖p_q(ψ_new)]
    + Σ_q KL[q_q‖p_q(ψ_old)] − Σ_q KL[q_q‖q̃_q]
    首步 (无快照) 时省略后两项, 缺失通道不贡献期望项
    """
    Xs, ys = _channel_data(model, batch)
    return _bound_multi(model, Xs, ys, _valid_priors(model), scale)


def predict_channel(model, d, X_test):
    """通道 d 的隐函数边缘: m = Σ a m_q, v = Σ a² v_q"""
    if not model.trained:
        raise ParameterError("模型尚未训练")
    if not 0 <= d < model.D:
        raise ParameterError(f"通道下标越界: {d}")
    X = as_inputs(X_test)
    m = np.zeros(X.shape[0])
    v = np.zeros(X.shape[0])
    for i in range(model.Q):
        m_q, v_q = marginal_posterior(model.q[i], model.Z[i], X, model.kernels[i])
        m = m + model.mixing.A[d, i] * m_q
        v = v + model.mixing.A[d, i] ** 2 * v_q
    return m, v


# ==================== 参数打包 ====================

class ParamLayout:
    """[q_1 .. q_Q | (log ℓ, log σ)_1 .. _Q | A]"""

    def __init__(self, M_list, D):
        self.M_list = list(M_list)
        self.Q = len(self.M_list)
        self.D = D
        self.q_sizes = [GaussianVariational.n_params(M) for M in self.M_list]
        self.n_var = sum(self.q_sizes)
        self.size = self.n_var + 2 * self.Q + D * self.Q

    def e_mask(self):
        mask = np.zeros(self.size, dtype=bool)
        mask[:self.n_var] = True
        return mask

    def pack(self, model):
        parts = [qq.pack() for qq in model.q]
        parts += [k.log_params for k in model.kernels]
        parts.append(model.mixing.A.ravel())
        return np.concatenate(parts)

    def unpack(self, model, theta):
        q, start = [], 0
        for M, n in zip(self.M_list, self.q_sizes):
            q.append(GaussianVariational.unpack(theta[start:start + n], M))
            start += n
        kernels = [k.with_log_params(theta[start + 2 * i:start + 2 * i + 2])
                   for i, k in enumerate(model.kernels)]
        start += 2 * self.Q
        A = theta[start:start + self.D * self.Q].reshape(self.D, self.Q)
        return replace(model, q=q, kernels=kernels, mixing=LMCMixing(A))

    def pack_grads(self, bound):
        g = bound.grads
        parts = [np.concatenate([mu, dL[np.tril_indices(mu.size)]])
                 for mu, dL in zip(g['mu'], g['L'])]
        parts.append(np.column_stack([g['log_lengthscale'], g['log_amplitude']]).ravel())
        parts.append(g['mixing'].ravel())
        return np.concatenate(parts)


def _objective(model, Xs, ys, layout):
    # 小批量下标指向所有通道拼接后的观测
    owners = [(d, r) for d, X in enumerate(Xs) if X is not None for r in range(X.shape[0])]
    owners = np.array(owners, dtype=int).reshape(-1, 2)
    N = owners.shape[0]

    def objective(theta, idx=None):
        try:
            m = layout.unpack(model, theta)
            if idx is None:
                b = _bound_multi(m, Xs, ys, model.priors)
            else:
                sel = owners[idx]
                Xb, yb = [], []
                for d in range(model.D):
                    rows = sel[sel[:, 0] == d, 1]
                    if rows.size == 0:
                        Xb.append(None)
                        yb.append(None)
                    else:
                        Xb.append(Xs[d][rows])
                        yb.append(ys[d][rows])
                b = _bound_multi(m, Xb, yb, model.priors, scale=N / len(idx))
        except (NumericalError, ParameterError, FloatingPointError):
            return np.nan, np.full(theta.size, np.nan)
        return b.value, layout.pack_grads(b)

    return objective, N


# ==================== 逐批更新 ====================

def _initial_mixing(model, present, mixing_init, rng):
    fresh = rng.standard_normal((model.D, model.Q))
    if not model.trained or mixing_init == 'random_all':
        return LMCMixing(fresh)
    A = np.array(model.mixing.A)
    if mixing_init == 'random':
        # 只重置本批出现的通道, 缺失通道沿用上一步
        A[present] = fresh[present]
    elif mixing_init != 'carry':
        raise ParameterError(f"未知的 mixing_init: {mixing_init}")
    return LMCMixing(A)


def continual_step_multi(model, batch, schedule, opt, vem=None, hyper_init='carry',
                         fixed_kernels=None, mixing_init='random', seed=0):
    """冻结旧后验 → 每个隐函数布点并重建连续先验 → 变分EM"""
    Xs, ys = _channel_data(model, batch)
    for d, y in enumerate(ys):
        if y is not None:
            check_outputs(model.likelihoods[d], y)
    present = np.array([X is not None for X in Xs])
    X_all = np.vstack([X for X in Xs if X is not None])
    lo, hi = X_all.min(axis=0), X_all.max(axis=0)
    if model.domain is not None:
        lo, hi = np.minimum(lo, model.domain[0]), np.maximum(hi, model.domain[1])
    width = np.where(hi > lo, 0.0, 1e-3)
    domain = (lo - width, hi + width)

    t = model.steps_done + 1
    M = schedule.size(t)
    per_side = schedule.per_side_count(t) if X_all.shape[1] > 1 else None
    rng = np.random.default_rng(seed)
    mixing = _initial_mixing(model, present, mixing_init, rng)

    kernels = model.kernels
    if model.trained and hyper_init == 'fixed':
        if fixed_kernels is None:
            raise ParameterError("hyper_init='fixed' 需要 fixed_kernels")
        kernels = list(fixed_kernels)

    if not model.trained:
        Z = [init_inducing(domain[0], domain[1], M, None, seed + i, per_side)
             for i in range(model.Q)]
        m = replace(model, Z=Z, mixing=mixing, domain=domain, snapshot=None, priors=None)
        m.q = [GaussianVariational(np.zeros(Zq.M), cholesky_with_jitter(kernel_matrix(k, Zq.Z)).L)
               for k, Zq in zip(m.kernels, Z)]
    else:
        snapshot = model.freeze()
        Z = [init_inducing(domain[0], domain[1], M, snapshot.Z[i], seed + i, per_side)
             for i in range(model.Q)]
        m = replace(model, kernels=list(kernels), Z=Z, mixing=mixing, snapshot=snapshot,
                    priors=None, domain=domain)
        priors = m.refresh_priors()
        m.q = [GaussianVariational(p.mean.copy(), p.factor.L.copy()) for p in priors]

    layout = ParamLayout([Zq.M for Zq in m.Z], m.D)
    objective, n_data = _objective(m, Xs, ys, layout)
    theta0 = layout.pack(m)
    elbo_init = objective(theta0)[0]
    if vem is not None:
        res = vem_loop(objective, theta0, layout.e_mask(), vem, opt, n_data)
    else:
        res = maximize(objective, theta0, opt, n_data)

    fitted = layout.unpack(m, res.x)
    fitted.q = [qq.canonical() for qq in fitted.q]
    fitted.steps_done = t
    fitted.last_fit = FitInfo(elbo_init, res.value, res.converged, res.iters, res.trace, res.aborted)
    if not res.converged:
        logger.info(f"[INFO] 第{t}步优化未收敛, 使用最优迭代点")
    logger.debug(f"[step {t}] Q={m.Q} M={M} ELBO {elbo_init:.4g} -> {res.value:.4g}")
    return fitted
