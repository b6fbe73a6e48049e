"""
连续高斯过程 - 配置文件
"""
import os

__version__ = '0.3.0'

# ==================== 数值参数 ====================

# Cholesky jitter: 相对于对角线均值, 每次失败后 ×10, 直到上限
JITTER = {
    'base': 0.0,       # 首次尝试不加jitter
    'floor': 1e-6,     # 升级阶梯的起点
    'factor': 10.0,
    'cap': 1e-1,
}

# 对称性检查容差
SYMMETRY_TOL = 1e-8

# Gauss-Hermite 节点数
QUADRATURE = {
    'nodes': 20,
}

# 边缘方差下限 (进入积分前截断)
VARIANCE_FLOOR = 1e-12

# 诱导点重合检查
COINCIDENCE = {
    'warn_distance': 1e-9,   # 小于此距离给出警告
    'init_jitter': 1e-3,     # 初始化时的扰动幅度 (相对区间长度)
    'max_retries': 100,
}

# ==================== 优化器 ====================

OPTIMIZER_DEFAULTS = {
    'method': 'full_batch_qn',
    'max_iters': 100,        # 每次优化最多100步
    'grad_tol': 1e-5,
    'ftol': 2.2e-9,          # 相对下降量低于此值时停止
    'memory': 10,            # 拟牛顿曲率记忆长度
    'minibatch_size': None,
    'seed': 0,
}

# ADADELTA 参数
ADADELTA = {
    'rho': 0.95,
    'eps': 1e-6,
    'learning_rate': 1.0,
}

# 非有限目标值连续出现多少次后放弃
MAX_NONFINITE = 20

# 变分EM
VEM_DEFAULTS = {
    'rounds': 4,
    'e_iters': 50,
    'm_iters': 50,
}

# ==================== 诱导点增长规则 ====================

INDUCING_PRESETS = {
    'streaming': {'rule': 'linear', 'M': 3, 'factor': 1},        # M_t = tM
    'overlapping': {'rule': 'linear', 'M': 4, 'factor': 2},      # M_t = 2tM
    'incremental': {'rule': 'incremental', 'M': 4},             # M_t = M_{t-1} + 2t
    'currency': {'rule': 'additive', 'M': 20, 'increment': 20},  # 线性增长
    'banana': {'rule': 'additive', 'M': 3, 'increment': 1, 'per_side': True},
    'synchronous': {'rule': 'additive', 'M': 5, 'increment': 5},
    'asynchronous': {'rule': 'doubling', 'M': 4},
    'mocap': {'rule': 'constant', 'M': 10},
    'solar': {'rule': 'additive', 'M': 15, 'increment': 1, 'every': 25},
}

# ==================== 玩具数据 ====================

TOY_SINGLE = {
    'N': 2000,
    'noise': [1.5],
    'input_range': (0.0, 1.0),
    'lengthscale': 0.01,
    'amplitude': 0.5,
}

TOY_MULTI = {
    'N': 2000,
    'noise': [1.0, 2.0],
    'input_range': (0.0, 1.0),
    # 行: 输出通道, 列: 隐函数
    'mixing': [[-0.5, 0.1], [-0.1, 0.6]],
    'lengthscale': 0.05,
    'amplitude': 0.5,
}

# ==================== 评估 ====================

METRICS = {
    'nlpd_samples': 1000,
    'replicas': 10,
    'density_floor': 1e-300,
    'class_threshold': 0.5,
}

# 旧区域NLPD相对漂移预警
DRIFT_THRESHOLDS = {
    'extreme': 0.10,    # >10% 红色预警
    'warning': 0.05,    # >5% 黄色关注
}

CURVE_POINTS = 400

REPORT_COLUMNS = [
    'step', 'region', 'channel', 'kind', 'n_test',
    'nlpd_mean', 'nlpd_std', 'error_rate_mean', 'error_rate_std',
    'n_inducing', 'elbo_mean', 'replicas_ok',
]

EXIT_CODES = {
    'ok': 0,
    'config_error': 2,
    'numerical_abort': 3,
}

# ==================== 存储 ====================

SNAPSHOT_SCHEMA_VERSION = 1

OUTPUT_DIR = os.environ.get('CONTINUAL_GP_OUTPUT_DIR', 'results')


def get_thread_cap():
    """读取副本并行上限"""
    raw = os.environ.get('CONTINUAL_GP_THREADS', '1')
    try:
        return max(1, int(raw))
    except ValueError:
        return 1
