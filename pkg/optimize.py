"""
连续高斯过程 - 优化模块
全批量拟牛顿上升 (L-BFGS-B)、随机自适应步长 (ADADELTA)、变分EM交替
"""
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from config import ADADELTA, MAX_NONFINITE, OPTIMIZER_DEFAULTS, VEM_DEFAULTS
from errors import NumericalError, ParameterError

logger = logging.getLogger(__name__)


class OptimizerMethod(Enum):
    FULL_BATCH_QN = 'full_batch_qn'
    STOCHASTIC_ADAPTIVE = 'stochastic_adaptive'


@dataclass(frozen=True)
class OptimizerConfig:
    method: OptimizerMethod = OptimizerMethod.FULL_BATCH_QN
    max_iters: int = OPTIMIZER_DEFAULTS['max_iters']
    grad_tol: float = OPTIMIZER_DEFAULTS['grad_tol']
    ftol: float = OPTIMIZER_DEFAULTS['ftol']
    minibatch_size: Optional[int] = None
    rho: float = ADADELTA['rho']
    eps: float = ADADELTA['eps']
    learning_rate: float = ADADELTA['learning_rate']
    memory: int = OPTIMIZER_DEFAULTS['memory']
    seed: int = 0

    def __post_init__(self):
        if not isinstance(self.method, OptimizerMethod):
            object.__setattr__(self, 'method', OptimizerMethod(self.method))
        if self.max_iters < 0:
            raise ParameterError(f"max_iters不能为负: {self.max_iters}")
        if self.grad_tol <= 0 or self.rho <= 0 or self.eps <= 0:
            raise ParameterError("grad_tol、rho、eps 必须为正")
        if self.method is OptimizerMethod.STOCHASTIC_ADAPTIVE:
            if self.minibatch_size is None or self.minibatch_size < 1:
                raise ParameterError("随机方法需要 minibatch_size ≥ 1")

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        return cls(
            method=OptimizerMethod(d.get('method', OPTIMIZER_DEFAULTS['method'])),
            max_iters=int(d.get('max_iters', OPTIMIZER_DEFAULTS['max_iters'])),
            grad_tol=float(d.get('grad_tol', OPTIMIZER_DEFAULTS['grad_tol'])),
            ftol=float(d.get('ftol', OPTIMIZER_DEFAULTS['ftol'])),
            minibatch_size=d.get('minibatch_size'),
            rho=float(d.get('rho', ADADELTA['rho'])),
            eps=float(d.get('eps', ADADELTA['eps'])),
            learning_rate=float(d.get('learning_rate', ADADELTA['learning_rate'])),
            memory=int(d.get('memory', OPTIMIZER_DEFAULTS['memory'])),
            seed=int(d.get('seed', OPTIMIZER_DEFAULTS['seed'])),
        )

    @property
    def stochastic(self):
        return self.method is OptimizerMethod.STOCHASTIC_ADAPTIVE


@dataclass(frozen=True)
class VEMSchedule:
    rounds: int = VEM_DEFAULTS['rounds']
    e_iters: int = VEM_DEFAULTS['e_iters']
    m_iters: int = VEM_DEFAULTS['m_iters']

    def __post_init__(self):
        if min(self.rounds, self.e_iters, self.m_iters) < 1:
            raise ParameterError("VEM 的 rounds/e_iters/m_iters 都必须 ≥ 1")

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        return cls(int(d.get('rounds', VEM_DEFAULTS['rounds'])),
                   int(d.get('e_iters', VEM_DEFAULTS['e_iters'])),
                   int(d.get('m_iters', VEM_DEFAULTS['m_iters'])))


@dataclass
class OptimizeResult:
    x: np.ndarray
    value: float
    converged: bool
    iters: int
    trace: list = field(default_factory=list)
    aborted: bool = False


class _Abort(Exception):
    pass


class _Guard:
    """包装目标函数: 记录最优点, 非有限值视为拒绝的步长"""

    def __init__(self, objective):
        self.objective = objective
        self.best_x = None
        self.best_value = -np.inf
        self.last_value = None
        self.last_grad = None
        self.nonfinite = 0
        self.last_x = None

    def __call__(self, x, idx=None):
        value, grad = self.objective(x, idx)
        value = float(value)
        grad = np.asarray(grad, dtype=float)
        if not (np.isfinite(value) and np.all(np.isfinite(grad))):
            self.nonfinite += 1
            if self.nonfinite > MAX_NONFINITE:
                raise _Abort()
            return None, None
        self.nonfinite = 0
        self.last_x, self.last_value, self.last_grad = x.copy(), value, grad
        if idx is None and value > self.best_value:
            self.best_x, self.best_value = x.copy(), value
        return value, grad


def _check_start(guard, x0):
    value, grad = guard(x0)
    if value is None:
        raise NumericalError("初始点的目标函数或梯度非有限")
    return value, grad


def _maximize_qn(guard, x0, cfg):
    f0, _ = _check_start(guard, x0)
    trace = [f0]
    # 负值: 拒绝步长时返回的惩罚值, 促使线搜索回退
    penalty = abs(f0) * 1e3 + 1e10

    def fun(x):
        value, grad = guard(x)
        if value is None:
            return penalty, -guard.last_grad
        return -value, -grad

    def callback(xk):
        if guard.last_x is not None and np.array_equal(xk, guard.last_x):
            trace.append(guard.last_value)
        else:
            value, _ = guard(xk)
            if value is not None:
                trace.append(value)

    if cfg.max_iters == 0:
        return OptimizeResult(x0.copy(), f0, False, 0, trace)
    try:
        res = minimize(fun, x0, method='L-BFGS-B', jac=True, callback=callback,
                       options={'maxiter': cfg.max_iters, 'maxcor': cfg.memory,
                                'gtol': cfg.grad_tol, 'ftol': cfg.ftol})
    except _Abort:
        logger.warning("✗ 目标函数持续非有限, 返回最优迭代点")
        return OptimizeResult(guard.best_x, guard.best_value, False, len(trace) - 1, trace, True)

    converged = bool(res.success)
    if not converged:
        logger.debug(f"L-BFGS-B 未收敛: {res.message}")
    return OptimizeResult(guard.best_x, guard.best_value, converged, int(res.nit), trace)


def _maximize_adadelta(guard, x0, cfg, n_data):
    if n_data is None or n_data < 1:
        raise ParameterError("随机方法需要 n_data")
    f0, _ = _check_start(guard, x0)
    rng = np.random.default_rng(cfg.seed)
    b = min(cfg.minibatch_size, n_data)
    x = x0.copy()
    sq_avg = np.zeros_like(x)
    acc_delta = np.zeros_like(x)
    lr = cfg.learning_rate
    trace = [f0]
    batches = []
    try:
        for _ in range(cfg.max_iters):
            if not batches:
                perm = rng.permutation(n_data)
                batches = [perm[i:i + b] for i in range(0, n_data, b)]
            idx = np.sort(batches.pop(0))
            value, grad = guard(x, idx)
            if value is None:
                # 拒绝: 回到上一个有限点并减半步长
                lr *= 0.5
                if guard.last_x is not None:
                    x = guard.last_x.copy()
                continue
            trace.append(value)
            sq_avg = cfg.rho * sq_avg + (1 - cfg.rho) * grad ** 2
            delta = np.sqrt(acc_delta + cfg.eps) / np.sqrt(sq_avg + cfg.eps) * grad
            acc_delta = cfg.rho * acc_delta + (1 - cfg.rho) * delta ** 2
            x = x + lr * delta
    except _Abort:
        logger.warning("✗ 随机优化持续非有限, 返回最后有限迭代点")
        x = guard.last_x if guard.last_x is not None else x0.copy()
        value, _ = guard.objective(x, None)
        return OptimizeResult(x, float(value), False, len(trace) - 1, trace, True)

    value, grad = guard(x)
    if value is None:
        return OptimizeResult(guard.best_x, guard.best_value, False, cfg.max_iters, trace, True)
    converged = bool(np.max(np.abs(grad), initial=0.0) < cfg.grad_tol)
    return OptimizeResult(x, value, converged, cfg.max_iters, trace)


def maximize(objective, x0, cfg, n_data=None):
    """
    最大化 objective(x, idx) -> (value, grad)
    idx 为 None 表示全批量, 否则为小批量下标
    """
    x0 = np.asarray(x0, dtype=float).copy()
    guard = _Guard(objective)
    if cfg.stochastic:
        return _maximize_adadelta(guard, x0, cfg, n_data)
    return _maximize_qn(guard, x0, cfg)


def _block(objective, x_full, mask):
    def sub(xb, idx=None):
        x = x_full.copy()
        x[mask] = xb
        value, grad = objective(x, idx)
        return value, np.asarray(grad)[mask]
    return sub


def vem_loop(objective, x0, e_mask, schedule, cfg, n_data=None):
    """
    变分EM: E步只优化 e_mask 内参数, M步优化其余参数
    M块为空时退化为纯E步优化
    """
    x = np.asarray(x0, dtype=float).copy()
    e_mask = np.asarray(e_mask, dtype=bool)
    m_mask = ~e_mask
    trace = []
    iters = 0
    converged = False
    value, _ = objective(x, None)
    trace.append(float(value))

    for r in range(schedule.rounds):
        phases = [(e_mask, schedule.e_iters)]
        if np.any(m_mask):
            phases.append((m_mask, schedule.m_iters))
        converged = True
        for mask, n_iter in phases:
            if not np.any(mask):
                continue
            res = maximize(_block(objective, x, mask), x[mask],
                           replace(cfg, max_iters=n_iter), n_data)
            x[mask] = res.x
            iters += res.iters
            converged = converged and res.converged
            if res.aborted:
                value, _ = objective(x, None)
                trace.append(float(value))
                return OptimizeResult(x, float(value), False, iters, trace, True)
        value, _ = objective(x, None)
        trace.append(float(value))
        logger.debug(f"VEM round {r + 1}/{schedule.rounds}: {value:.6g}")

    return OptimizeResult(x, float(value), converged, iters, trace)
