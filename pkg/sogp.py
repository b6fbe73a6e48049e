"""
连续高斯过程 - 单输出模型
标准ELBO、连续下界 (三个KL项)、随机小批量形式、预测与逐批更新
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from config import VARIANCE_FLOOR
from errors import NumericalError, ParameterError, StaleCacheError
from likelihoods import check_outputs, variational_expectation
from math_core import (
    Kernel, as_inputs, cholesky_with_jitter, gaussian_kl_grads, kernel_diag_grads,
    kernel_matrix, kernel_matrix_grads,
)
from optimize import maximize, vem_loop
from variational_state import (
    GaussianVariational, InducingSet, LatentProjection, PosteriorSnapshot,
    init_inducing, marginal_posterior, prior_key,
    reconstruct_continual_prior,
)

logger = logging.getLogger(__name__)


@dataclass
class BoundValue:
    """下界值、分项与梯度"""
    value: float
    terms: dict
    grads: dict = field(default_factory=dict)


@dataclass
class FitInfo:
    elbo_init: float
    elbo: float
    converged: bool
    iters: int
    trace: list
    aborted: bool = False


@dataclass
class SingleOutputModel:
    kernel: Kernel
    likelihood: object
    Z: Optional[InducingSet] = None
    q: Optional[GaussianVariational] = None
    snapshot: Optional[PosteriorSnapshot] = None
    prior: object = None
    domain: Optional[tuple] = None
    steps_done: int = 0
    last_fit: Optional[FitInfo] = None

    @property
    def trained(self):
        return self.q is not None

    def freeze(self):
        """当前后验冻结为快照"""
        if not self.trained:
            raise ParameterError("模型尚未训练, 无法生成快照")
        return PosteriorSnapshot(Z=(self.Z,), q=(self.q,), kernels=(self.kernel,),
                                 step=self.steps_done)

    @classmethod
    def from_snapshot(cls, snapshot, likelihood, domain, steps_done):
        """从检查点恢复, 下一步以该后验为旧后验"""
        return cls(kernel=snapshot.kernels[0], likelihood=likelihood, Z=snapshot.Z[0],
                   q=snapshot.q[0], domain=domain, steps_done=steps_done)

    def refresh_prior(self):
        if self.snapshot is None:
            self.prior = None
        elif self.prior is None or self.prior.key != prior_key(self.snapshot, self.Z):
            self.prior = reconstruct_continual_prior(self.snapshot, self.Z)
        return self.prior


# ==================== 下界的公共部件 ====================

def expectation_terms(proj, likelihood, y, q, scale=1.0):
    """
    Σ_n E_q[log p(y_n|f_n)] (乘以 scale)
    返回: (value, d_mu, d_L, d_Kfu, d_Kuu, d_kff)
    """
    m, v = proj.forward(q.mu, q.L)
    floored = v < VARIANCE_FLOOR
    ve, dm, dv = variational_expectation(likelihood, y, m, np.maximum(v, VARIANCE_FLOOR))
    dv = np.where(floored, 0.0, dv)
    value = scale * float(np.sum(ve))
    return (value,) + proj.backward(scale * dm, scale * dv)


def latent_kl_terms(q, Kuu_factor, prior=None):
    """
    −KL[q‖p(ψ_new)] + KL[q‖p(ψ_old)] − KL[q‖q̃]
    prior 为 None 时只有第一项
    返回: (terms, d_mu, d_L, d_Kuu)
    """
    M = q.M
    kl_new, d_mu, d_L, d_K = gaussian_kl_grads(q.mu, q.L, np.zeros(M), Kuu_factor)
    terms = {'kl_new': kl_new, 'kl_old': 0.0, 'kl_continual': 0.0}
    d_mu, d_L, d_Kuu = -d_mu, -d_L, -d_K
    if prior is not None:
        kl_old, g_mu, g_L, _ = gaussian_kl_grads(q.mu, q.L, np.zeros(M), prior.old_prior_factor)
        kl_c, c_mu, c_L, _ = gaussian_kl_grads(q.mu, q.L, prior.mean, prior.factor)
        terms['kl_old'] = kl_old
        terms['kl_continual'] = kl_c
        d_mu = d_mu + g_mu - c_mu
        d_L = d_L + g_L - c_L
    return terms, d_mu, d_L, d_Kuu


def kernel_hyper_grads(kernel, Z, X, d_Kfu, d_Kuu, d_kff):
    """核矩阵梯度链到 (log ℓ, log σ_a)"""
    _, Kuu_ell, Kuu_amp = kernel_matrix_grads(kernel, Z.Z)
    g = np.array([np.sum(d_Kuu * Kuu_ell), np.sum(d_Kuu * Kuu_amp)])
    if X is not None and X.shape[0] > 0:
        _, Kfu_ell, Kfu_amp = kernel_matrix_grads(kernel, X, Z.Z)
        kff_ell, kff_amp = kernel_diag_grads(kernel, X)
        g += np.array([np.sum(d_Kfu * Kfu_ell) + d_kff @ kff_ell,
                       np.sum(d_Kfu * Kfu_amp) + d_kff @ kff_amp])
    return g


def _bound(model, X, y, prior, scale=1.0):
    X = as_inputs(X)
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.size:
        raise ParameterError(f"X 行数 {X.shape[0]} 与 y 长度 {y.size} 不一致")
    if X.shape[0] == 0:
        raise ParameterError("批数据为空")
    proj = LatentProjection(model.kernel, model.Z, X)
    e_val, e_mu, e_L, d_Kfu, e_Kuu, d_kff = expectation_terms(
        proj, model.likelihood, y, model.q, scale)
    terms, k_mu, k_L, k_Kuu = latent_kl_terms(model.q, proj.factor, prior)
    terms['expectation'] = e_val
    value = e_val - terms['kl_new'] + terms['kl_old'] - terms['kl_continual']
    hyper = kernel_hyper_grads(model.kernel, model.Z, X, d_Kfu, e_Kuu + k_Kuu, d_kff)
    grads = {
        'mu': e_mu + k_mu,
        'L': e_L + k_L,
        'log_lengthscale': hyper[0],
        'log_amplitude': hyper[1],
    }
    return BoundValue(value, terms, grads)


# ==================== 下界 ====================

def elbo_standard(model, X, y):
    """首步: Σ E − KL[q‖p(ψ)]"""
    if model.snapshot is not None:
        raise ParameterError("已有快照, 应使用连续下界")
    return _bound(model, X, y, None)


def _valid_prior(model):
    if model.snapshot is None:
        raise ParameterError("没有快照, 应使用标准ELBO")
    if model.prior is None or model.prior.key != prior_key(model.snapshot, model.Z):
        raise StaleCacheError("连续先验缓存与当前快照/诱导点不一致")
    return model.prior


def elbo_continual(model, X_new, y_new):
    """E − KL[q‖p(ψ_new)] + KL[q‖p(ψ_old)] − KL[q‖q̃]"""
    return _bound(model, X_new, y_new, _valid_prior(model))


def elbo_continual_stochastic(model, X_b, y_b, n_total):
    """期望项乘 N/|b|, KL项不缩放"""
    n_b = as_inputs(X_b).shape[0]
    if not 1 <= n_b <= n_total:
        raise ParameterError(f"小批量大小 {n_b} 不在 [1, {n_total}] 内")
    return _bound(model, X_b, y_b, _valid_prior(model), scale=n_total / n_b)


def predict(model, X_test):
    """q(f) 在测试点的均值与方差"""
    if not model.trained:
        raise ParameterError("模型尚未训练")
    return marginal_posterior(model.q, model.Z, X_test, model.kernel)


# ==================== 参数打包 ====================

def pack_params(model):
    return np.concatenate([model.q.pack(), model.kernel.log_params])


def unpack_params(model, theta):
    M = model.Z.M
    n = GaussianVariational.n_params(M)
    q = GaussianVariational.unpack(theta[:n], M)
    return replace(model, q=q, kernel=model.kernel.with_log_params(theta[n:n + 2]))


def pack_grads(bound, M):
    idx = np.tril_indices(M)
    return np.concatenate([bound.grads['mu'], bound.grads['L'][idx],
                           [bound.grads['log_lengthscale'], bound.grads['log_amplitude']]])


def _objective(model, X, y, optimize_hypers=True):
    X = as_inputs(X)
    y = np.asarray(y, dtype=float).ravel()
    N = X.shape[0]
    M = model.Z.M

    def objective(theta, idx=None):
        try:
            m = unpack_params(model, theta)
            if idx is None:
                b = _bound(m, X, y, model.prior)
            else:
                b = _bound(m, X[idx], y[idx], model.prior, scale=N / len(idx))
        except (NumericalError, ParameterError, FloatingPointError):
            # 超参数溢出或分解失败, 当作非有限值由优化器拒绝
            return np.nan, np.full(theta.size, np.nan)
        g = pack_grads(b, M)
        if not optimize_hypers:
            g[-2:] = 0.0
        return b.value, g

    return objective


def fit_variational(model, X, y, opt, vem=None, optimize_hypers=True):
    """在当前 Z、先验下最大化下界, 返回 (新模型, FitInfo)"""
    objective = _objective(model, X, y, optimize_hypers)
    theta0 = pack_params(model)
    n_data = as_inputs(X).shape[0]
    elbo_init = objective(theta0)[0]
    if vem is not None:
        e_mask = np.ones(theta0.size, dtype=bool)
        if optimize_hypers:
            e_mask[-2:] = False
        res = vem_loop(objective, theta0, e_mask, vem, opt, n_data)
    else:
        res = maximize(objective, theta0, opt, n_data)
    fitted = unpack_params(model, res.x)
    fitted.q = fitted.q.canonical()
    info = FitInfo(elbo_init, res.value, res.converged, res.iters, res.trace, res.aborted)
    if not res.converged:
        logger.info(f"[INFO] 第{model.steps_done + 1}步优化未收敛, 使用最优迭代点")
    return fitted, info


def _extend_domain(domain, X):
    lo, hi = X.min(axis=0), X.max(axis=0)
    if domain is not None:
        lo, hi = np.minimum(lo, domain[0]), np.maximum(hi, domain[1])
    # 单点批次时区间退化
    width = np.where(hi > lo, 0.0, 1e-3)
    return lo - width, hi + width


def continual_step(model, X_new, y_new, schedule, opt, vem=None,
                   hyper_init='carry', fixed_kernel=None, seed=0):
    """
    处理一批新数据: 冻结旧后验、布置新诱导点、重建连续先验、优化连续下界
    返回新模型, 从不读取之前的批数据
    """
    X = as_inputs(X_new)
    y = check_outputs(model.likelihood, np.asarray(y_new, dtype=float).ravel())
    if X.shape[0] == 0:
        raise ParameterError("批数据为空")
    t = model.steps_done + 1
    domain = _extend_domain(model.domain, X)
    M = schedule.size(t)
    per_side = schedule.per_side_count(t) if X.shape[1] > 1 else None

    if not model.trained:
        Z = init_inducing(domain[0], domain[1], M, None, seed, per_side)
        m = replace(model, Z=Z, domain=domain, snapshot=None, prior=None)
        m.q = _prior_variational(m.kernel, Z)
    else:
        snapshot = model.freeze()
        Z = init_inducing(domain[0], domain[1], M, snapshot.Z[0], seed, per_side)
        kernel = model.kernel
        if hyper_init == 'fixed':
            if fixed_kernel is None:
                raise ParameterError("hyper_init='fixed' 需要 fixed_kernel")
            kernel = fixed_kernel
        m = replace(model, kernel=kernel, Z=Z, snapshot=snapshot, prior=None, domain=domain)
        prior = m.refresh_prior()
        # 从连续先验热启动
        m.q = GaussianVariational(prior.mean.copy(), prior.factor.L.copy())

    fitted, info = fit_variational(m, X, y, opt, vem)
    fitted.steps_done = t
    fitted.last_fit = info
    logger.debug(f"[step {t}] M={Z.M} ELBO {info.elbo_init:.4g} -> {info.elbo:.4g}")
    return fitted


def _prior_variational(kernel, Z):
    """q(u) 初始化为先验 N(0, Kuu)"""
    K = kernel_matrix(kernel, Z.Z)
    return GaussianVariational(np.zeros(Z.M), cholesky_with_jitter(K).L)
