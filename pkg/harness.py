"""
连续高斯过程 - 实验运行模块
解析配置、逐批更新模型、逐区域评估、汇总多个副本并输出报告
"""
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from config import CURVE_POINTS, METRICS, OUTPUT_DIR, get_thread_cap
from data_fetcher import (
    BatchMode, BatchSchedule, DataFetcher, ToyKind, assign_regions, schedule_batches,
    split_train_test,
)
from errors import ConfigError, NumericalError, ParameterError
from likelihoods import HeterogeneousModel, LikelihoodSpec
from math_core import Kernel
from mogp import LMCMixing, MultiOutputModel, continual_step_multi
from optimize import OptimizerConfig, VEMSchedule
from report_writer import aggregate_reports, emit_reports, version_stamp
from scoring import DriftMonitor, evaluate_step, predict_marginals
from snapshot_manager import SnapshotManager
from sogp import SingleOutputModel, continual_step
from variational_state import InducingSchedule

logger = logging.getLogger(__name__)

REPLICA_SEED_STRIDE = 1000


# ==================== 配置 ====================

@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    dataset: dict
    test_fraction: float
    model_type: str
    kernels: tuple
    likelihoods: HeterogeneousModel
    schedule: BatchSchedule
    inducing: InducingSchedule
    optimizer: OptimizerConfig
    vem: Optional[VEMSchedule] = None
    Q: int = 1
    hyper_init: str = 'carry'
    mixing_init: str = 'random'
    nlpd_samples: int = METRICS['nlpd_samples']
    replicas: int = METRICS['replicas']
    curve_points: int = CURVE_POINTS
    seed: int = 0
    output_dir: str = OUTPUT_DIR
    checkpoint: bool = False
    raw: dict = field(default_factory=dict, compare=False)

    @property
    def D(self):
        return len(self.likelihoods)

    @property
    def is_multi(self):
        return self.model_type == 'multi'

    @classmethod
    def from_dict(cls, d):
        """校验并构造配置, 出错时抛出带键名的 ConfigError"""
        if not isinstance(d, dict):
            raise ConfigError("配置必须是JSON对象")
        key = None
        try:
            key = 'dataset'
            dataset = dict(d['dataset'])
            if dataset.get('kind', 'toy') not in ('toy', 'csv'):
                raise ConfigError(f"未知的数据类型 {dataset.get('kind')}", key)
            if dataset.get('kind') == 'csv' and 'path' not in dataset:
                raise ConfigError("CSV数据需要 path", key)

            key = 'model'
            model = dict(d['model'])
            model_type = model.get('type', 'single')
            if model_type not in ('single', 'multi'):
                raise ConfigError(f"未知的模型类型 {model_type}", key)
            Q = int(model.get('Q', 1))
            key = 'model.kernels'
            kernels = tuple(Kernel.from_dict(k) for k in model['kernels'])
            key = 'model.likelihoods'
            likelihoods = HeterogeneousModel([LikelihoodSpec.from_dict(l)
                                              for l in model['likelihoods']])
            key = 'model.hyper_init'
            hyper_init = model.get('hyper_init', 'carry')
            if hyper_init not in ('carry', 'fixed'):
                raise ConfigError(f"未知的取值 {hyper_init}", key)
            key = 'model.mixing_init'
            mixing_init = model.get('mixing_init', 'random')
            if mixing_init not in ('random', 'random_all', 'carry'):
                raise ConfigError(f"未知的取值 {mixing_init}", key)

            key = 'schedule'
            sched = dict(d.get('schedule', {}))
            sched.setdefault('seed', d.get('seed', 0))
            schedule = BatchSchedule.from_dict(sched)
            key = 'inducing'
            inducing = InducingSchedule.from_dict(d.get('inducing', 'streaming'))
            key = 'optimizer'
            optimizer = OptimizerConfig.from_dict(d.get('optimizer'))
            key = 'vem'
            vem = VEMSchedule.from_dict(d['vem']) if d.get('vem') else None
            key = 'metrics'
            metrics = dict(d.get('metrics', {}))

            key = 'test_fraction'
            cfg = cls(
                name=str(d.get('name', 'experiment')),
                dataset=dataset,
                test_fraction=float(d.get('test_fraction', 0.3)),
                model_type=model_type,
                kernels=kernels,
                likelihoods=likelihoods,
                schedule=schedule,
                inducing=inducing,
                optimizer=optimizer,
                vem=vem,
                Q=Q,
                hyper_init=hyper_init,
                mixing_init=mixing_init,
                nlpd_samples=int(metrics.get('nlpd_samples', METRICS['nlpd_samples'])),
                replicas=int(metrics.get('replicas', METRICS['replicas'])),
                curve_points=int(metrics.get('curve_points', CURVE_POINTS)),
                seed=int(d.get('seed', 0)),
                output_dir=str(d.get('output_dir', os.path.join(OUTPUT_DIR, d.get('name', 'experiment')))),
                checkpoint=bool(d.get('checkpoint', False)),
                raw=json.loads(json.dumps(d)),
            )
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"{type(e).__name__}: {e}", key) from e
        cfg.validate()
        return cfg

    def validate(self):
        if not 0 < self.test_fraction < 1:
            raise ConfigError("必须在 (0, 1) 内", 'test_fraction')
        if self.replicas < 1 or self.nlpd_samples < 1 or self.curve_points < 2:
            raise ConfigError("replicas/nlpd_samples ≥ 1, curve_points ≥ 2", 'metrics')
        if self.is_multi:
            if len(self.kernels) != self.Q:
                raise ConfigError(f"核数量 {len(self.kernels)} 与 Q={self.Q} 不一致", 'model.kernels')
        else:
            if self.Q != 1 or len(self.kernels) != 1 or self.D != 1:
                raise ConfigError("单输出模型需要 Q=1、一个核、一个似然", 'model')
        if self.dataset.get('kind', 'toy') == 'toy':
            which = ToyKind(self.dataset.get('which', 'single'))
            expected = 1 if which is ToyKind.SINGLE else 2
            if self.D != expected:
                raise ConfigError(f"玩具数据有 {expected} 个通道, 似然有 {self.D} 个",
                                  'model.likelihoods')
        if self.schedule.mode is BatchMode.ASYNC_SWITCHING and self.D < 2:
            raise ConfigError("通道交替需要 D ≥ 2", 'schedule.mode')


def load_config(path):
    try:
        with open(path, 'r', encoding='utf-8') as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"无法读取配置 {path}: {e}") from e
    return ExperimentConfig.from_dict(raw)


# ==================== 单个副本 ====================

@dataclass
class ReplicaResult:
    replica: int
    reports: list = field(default_factory=list)
    curves: list = field(default_factory=list)
    fits: list = field(default_factory=list)
    timing: list = field(default_factory=list)
    error: Optional[dict] = None

    @property
    def aborted(self):
        return self.error is not None


@dataclass
class StreamData:
    train: object
    test: object
    batches: list
    regions: np.ndarray


def prepare_stream(cfg, data_dir='.'):
    """数据集、划分、分批与测试点区域, 所有副本共享"""
    fetcher = DataFetcher(data_dir)
    try:
        ds = fetcher.fetch(cfg.dataset, cfg.likelihoods, seed=cfg.seed)
    except ParameterError as e:
        raise ConfigError(str(e), 'dataset') from e
    if ds.D != cfg.D:
        raise ConfigError(f"数据有 {ds.D} 个通道, 似然有 {cfg.D} 个", 'model.likelihoods')
    train, test = split_train_test(ds, cfg.test_fraction, cfg.seed)
    try:
        batches = schedule_batches(train, cfg.schedule)
    except ParameterError as e:
        raise ConfigError(str(e), 'schedule') from e
    regions = assign_regions(batches, test.X, cfg.schedule.mode, cfg.seed)
    return StreamData(train, test, batches, regions)


def build_model(cfg):
    if cfg.is_multi:
        return MultiOutputModel(kernels=list(cfg.kernels),
                                mixing=LMCMixing(np.zeros((cfg.D, cfg.Q))),
                                likelihoods=cfg.likelihoods)
    return SingleOutputModel(kernel=cfg.kernels[0], likelihood=cfg.likelihoods[0])


def restore_model(cfg, snapshot, domain):
    if cfg.is_multi:
        return MultiOutputModel.from_snapshot(snapshot, cfg.likelihoods, domain, snapshot.step)
    return SingleOutputModel.from_snapshot(snapshot, cfg.likelihoods[0], domain, snapshot.step)


def step_model(cfg, model, batch, seed):
    opt = replace(cfg.optimizer, seed=seed)
    if cfg.is_multi:
        return continual_step_multi(model, batch, cfg.inducing, opt, cfg.vem, cfg.hyper_init,
                                    list(cfg.kernels), cfg.mixing_init, seed)
    X, y = batch.single()
    return continual_step(model, X, y, cfg.inducing, opt, cfg.vem, cfg.hyper_init,
                          cfg.kernels[0], seed)


def predictive_curves(model, cfg, n_points):
    """在已访问输入区间上取等距网格, 只支持一维输入"""
    lo, hi = model.domain
    if np.size(lo) != 1:
        return None
    grid = np.linspace(float(np.ravel(lo)[0]), float(np.ravel(hi)[0]), n_points)
    return grid, {d: predict_marginals(model, d, grid[:, None]) for d in range(cfg.D)}


def run_replica(cfg, stream, replica, checkpoints=None, resume=False):
    seed = cfg.seed + REPLICA_SEED_STRIDE * replica
    result = ReplicaResult(replica)
    model = build_model(cfg)
    start = 0
    if resume and checkpoints is not None:
        latest = checkpoints.latest(replica)
        if latest is not None:
            model = restore_model(cfg, *latest)
            start = model.steps_done
            logger.info(f"[INFO] 副本{replica} 从第{start}步检查点继续")

    test = stream.test
    for t, batch in enumerate(stream.batches):
        if t < start:
            continue
        tic = time.perf_counter()
        try:
            model = step_model(cfg, model, batch, seed + t)
            report = evaluate_step(model, t, test.X, test.Y, test.mask, stream.regions,
                                   cfg.likelihoods, cfg.nlpd_samples, seed + t)
        except NumericalError as e:
            logger.error(f"✗ 副本{replica} 第{t + 1}步数值失败: {e}")
            result.error = {'replica': replica, 'step': t, 'error': str(e)}
            break
        fit = model.last_fit
        report.n_inducing = sum(Zq.M for Zq in model.Z) if cfg.is_multi else model.Z.M
        report.elbo = fit.elbo
        report.elbo_trace = list(fit.trace)
        report.converged = fit.converged
        report.wall_time = time.perf_counter() - tic
        result.reports.append(report)
        result.fits.append({'step': t, 'elbo_init': fit.elbo_init, 'elbo': fit.elbo,
                            'converged': fit.converged, 'iters': fit.iters})
        result.timing.append({'step': t, 'seconds': report.wall_time})
        if replica == 0:
            curve = predictive_curves(model, cfg, cfg.curve_points)
            if curve is not None:
                result.curves.append((t,) + curve)
        if checkpoints is not None:
            checkpoints.save(model, replica)

        glob = [r['nlpd'] for r in report.rows if r['kind'] == 'global']
        logger.info(f"✓ 副本{replica} [step {t + 1}/{len(stream.batches)}] "
                    f"M={report.n_inducing} global NLPD={sum(glob):.4f}")
    return result


# ==================== 实验 ====================

@dataclass
class ExperimentResult:
    config: ExperimentConfig
    report: object
    replicas: list
    alerts: list
    paths: list = field(default_factory=list)

    @property
    def n_aborted(self):
        return sum(r.aborted for r in self.replicas)

    @property
    def all_aborted(self):
        return self.n_aborted == len(self.replicas)


def run_experiment(cfg, out_dir=None, write=True, resume=False, data_dir='.'):
    """运行全部副本, 汇总报告并写出文件"""
    out_dir = out_dir or cfg.output_dir
    stream = prepare_stream(cfg, data_dir)
    checkpoints = SnapshotManager(os.path.join(out_dir, 'checkpoints')) if cfg.checkpoint else None
    logger.info(f"[INFO] 实验 {cfg.name}: {len(stream.batches)} 步, {cfg.replicas} 个副本, "
                f"训练 {stream.train.N} / 测试 {stream.test.N}")

    workers = min(get_thread_cap(), cfg.replicas)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        replicas = list(pool.map(
            lambda r: run_replica(cfg, stream, r, checkpoints, resume), range(cfg.replicas)))

    monitor = DriftMonitor()
    for res in replicas:
        for report in res.reports:
            monitor.observe(report, res.replica)

    report_df = aggregate_reports([res.reports for res in replicas])
    result = ExperimentResult(cfg, report_df, replicas, monitor.alerts)
    if result.n_aborted:
        logger.warning(f"[WARN] {result.n_aborted}/{cfg.replicas} 个副本数值中止")

    if write:
        payload = {
            'name': cfg.name,
            'version': version_stamp(cfg.raw),
            'config': cfg.raw,
            'replicas': cfg.replicas,
            'aborted': [res.error for res in replicas if res.aborted],
            'fits': [dict(f, replica=res.replica) for res in replicas for f in res.fits],
            'alerts': monitor.alerts,
            'alert_summary': monitor.get_alert_summary(),
        }
        timing = {'replicas': [{'replica': res.replica, 'steps': res.timing} for res in replicas]}
        curves = replicas[0].curves if replicas else []
        result.paths = emit_reports(report_df, payload, timing, curves, out_dir)
    return result
