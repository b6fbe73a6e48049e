"""
连续高斯过程 - 评估模块
NLPD、分类错误率、逐区域统计与旧区域漂移预警
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from config import DRIFT_THRESHOLDS, METRICS
from errors import ParameterError
from likelihoods import error_rate, log_predictive_density_mc, predictive_mean
from mogp import MultiOutputModel, predict_channel
from sogp import predict

logger = logging.getLogger(__name__)


def predict_marginals(model, channel, X):
    """统一单输出/多输出的隐函数预测"""
    if isinstance(model, MultiOutputModel):
        return predict_channel(model, channel, X)
    if channel != 0:
        raise ParameterError(f"单输出模型只有通道0: {channel}")
    return predict(model, X)


def point_log_densities(model, X, y, channel, spec, n_samples=None, seed=0):
    """逐点 log 预测密度 (蒙特卡洛), 密度下限 1e-300"""
    m, v = predict_marginals(model, channel, X)
    logp = log_predictive_density_mc(spec, y, m, v, n_samples, seed)
    return np.maximum(np.atleast_1d(logp), np.log(METRICS['density_floor']))


def nlpd(model, X, y, channel, spec, n_samples=None, seed=0):
    """测试点上 −log p(y*) 的平均"""
    y = np.asarray(y, dtype=float).ravel()
    if y.size == 0:
        raise ParameterError("测试集为空")
    return float(-np.mean(point_log_densities(model, X, y, channel, spec, n_samples, seed)))


def classification_error(model, X, y, channel, spec):
    """伯努利通道的错误率"""
    m, v = predict_marginals(model, channel, X)
    return error_rate(spec, predictive_mean(spec, m, v), y)


# ==================== 每步报告 ====================

@dataclass
class StepReport:
    """单个副本在第 step 步的评估结果"""
    step: int
    rows: list = field(default_factory=list)
    n_inducing: int = 0
    elbo: float = float('nan')
    elbo_trace: list = field(default_factory=list)
    converged: bool = True
    wall_time: float = 0.0

    def add(self, region, channel, kind, n_test, nlpd_value, er=None):
        self.rows.append({
            'step': self.step,
            'region': region,
            'channel': channel,
            'kind': kind,
            'n_test': int(n_test),
            'nlpd': float(nlpd_value),
            'error_rate': float('nan') if er is None else float(er),
        })


def evaluate_step(model, step, test_X, test_Y, test_mask, regions, likelihoods,
                  n_samples=None, seed=0):
    """
    第 step 步 (从0开始) 的逐区域评估:
    new: 本步区域; old: 之前访问过的区域;
    global: 各区域 NLPD 之和; global_mean: 所有已访问测试点的平均
    """
    report = StepReport(step=step)
    visited = regions <= step
    for d, spec in enumerate(likelihoods):
        rows = test_mask[:, d] & visited
        if not np.any(rows):
            continue
        X, y, reg = test_X[rows], test_Y[rows, d], regions[rows]
        logp = point_log_densities(model, X, y, d, spec, n_samples, seed + d)
        hits = None
        if spec.is_classification:
            m, v = predict_marginals(model, d, X)
            hits = ((predictive_mean(spec, m, v) >= METRICS['class_threshold']) == (y == 1))

        total = 0.0
        for r in np.unique(reg):
            sel = reg == r
            value = float(-np.mean(logp[sel]))
            total += value
            er = None if hits is None else float(1.0 - np.mean(hits[sel]))
            report.add(int(r), d, 'new' if r == step else 'old', sel.sum(), value, er)
        er_all = None if hits is None else float(1.0 - np.mean(hits))
        report.add(-1, d, 'global', len(y), total, er_all)
        report.add(-1, d, 'global_mean', len(y), float(-np.mean(logp)), er_all)
    return report


# ==================== 漂移预警 ====================

class DriftMonitor:
    """旧区域 NLPD 相对首次访问值的漂移预警"""

    def __init__(self, thresholds=None):
        self.thresholds = thresholds or DRIFT_THRESHOLDS
        self.baseline = {}
        self.alerts = []

    def observe(self, report, replica=0):
        for row in report.rows:
            if row['kind'] not in ('new', 'old'):
                continue
            key = (replica, row['region'], row['channel'])
            if row['kind'] == 'new' or key not in self.baseline:
                self.baseline[key] = row['nlpd']
                continue
            self._check(key, row)

    def _check(self, key, row):
        base = self.baseline[key]
        drift = abs(row['nlpd'] - base) / max(abs(base), 1e-12)
        level = None
        if drift > self.thresholds['extreme']:
            level = 'extreme'
        elif drift > self.thresholds['warning']:
            level = 'warning'
        if level is None:
            return
        alert = {
            'level': level,
            'replica': key[0],
            'step': row['step'],
            'region': key[1],
            'channel': key[2],
            'baseline': base,
            'nlpd': row['nlpd'],
            'drift': drift,
            'message': f"区域{key[1]} 通道{key[2]} NLPD 漂移 {drift:.1%}",
        }
        self.alerts.append(alert)
        log = logger.warning if level == 'extreme' else logger.info
        log(f"[{level.upper()}] step {row['step']}: {alert['message']}")

    def get_alert_summary(self):
        return {
            'total': len(self.alerts),
            'extreme': sum(a['level'] == 'extreme' for a in self.alerts),
            'warning': sum(a['level'] == 'warning' for a in self.alerts),
        }
