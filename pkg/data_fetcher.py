"""
连续高斯过程 - 数据模块
玩具数据生成、CSV读取、训练/测试划分、数据流分批
"""
import logging
import os
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np
import pandas as pd

from config import TOY_MULTI, TOY_SINGLE
from errors import IngestionError, ParameterError
from likelihoods import HeterogeneousModel, LikelihoodSpec
from math_core import as_inputs

logger = logging.getLogger(__name__)


# ==================== 真实函数 ====================

def toy_single(x):
    """f(x) = 4.5cos(2πx + 1.5π) − 3sin(4.3πx + 0.3π) + 5cos(7πx + 2.4π)"""
    x = np.asarray(x, dtype=float)
    return (4.5 * np.cos(2 * np.pi * x + 1.5 * np.pi)
            - 3.0 * np.sin(4.3 * np.pi * x + 0.3 * np.pi)
            + 5.0 * np.cos(7 * np.pi * x + 2.4 * np.pi))


def toy_latent_second(x):
    """u₂(x) = 4.5cos(1.5πx + 0.5π) + 5sin(3πx + 1.5π) − 5.5cos(8πx + 0.25π)"""
    x = np.asarray(x, dtype=float)
    return (4.5 * np.cos(1.5 * np.pi * x + 0.5 * np.pi)
            + 5.0 * np.sin(3 * np.pi * x + 1.5 * np.pi)
            - 5.5 * np.cos(8 * np.pi * x + 0.25 * np.pi))


# ==================== 数据类型 ====================

class ToyKind(Enum):
    SINGLE = 'single'
    MULTI = 'multi'


@dataclass(frozen=True)
class ToySpec:
    kind: ToyKind = ToyKind.SINGLE
    N: int = TOY_SINGLE['N']
    noise: tuple = tuple(TOY_SINGLE['noise'])
    input_range: tuple = TOY_SINGLE['input_range']

    def __post_init__(self):
        if not isinstance(self.kind, ToyKind):
            object.__setattr__(self, 'kind', ToyKind(self.kind))
        object.__setattr__(self, 'noise', tuple(float(s) for s in self.noise))
        expected = 1 if self.kind is ToyKind.SINGLE else len(TOY_MULTI['mixing'])
        if len(self.noise) != expected:
            raise ParameterError(f"{self.kind.value} 需要 {expected} 个噪声值")
        if any(s < 0 for s in self.noise):
            raise ParameterError("噪声不能为负")
        if self.N < 1 or not self.input_range[0] < self.input_range[1]:
            raise ParameterError("N 必须 ≥ 1 且区间非空")

    @classmethod
    def from_dict(cls, d):
        kind = ToyKind(d.get('which', 'single'))
        preset = TOY_SINGLE if kind is ToyKind.SINGLE else TOY_MULTI
        return cls(kind, int(d.get('N', preset['N'])),
                   tuple(d.get('noise', preset['noise'])),
                   tuple(d.get('input_range', preset['input_range'])))


@dataclass
class Dataset:
    """
    X: N×p 输入; Y: N×D 输出 (缺失为NaN); mask: N×D 是否观测
    signal: 无噪声的通道值 (玩具数据); latent: 隐函数值 N×Q (多输出玩具)
    """
    X: np.ndarray
    Y: np.ndarray
    mask: np.ndarray
    likelihoods: Optional[HeterogeneousModel] = None
    signal: Optional[np.ndarray] = None
    latent: Optional[np.ndarray] = None
    mixing: Optional[np.ndarray] = None

    def __post_init__(self):
        self.X = as_inputs(self.X)
        self.Y = np.asarray(self.Y, dtype=float)
        if self.Y.ndim == 1:
            self.Y = self.Y[:, None]
        self.mask = np.asarray(self.mask, dtype=bool).reshape(self.Y.shape)
        if self.X.shape[0] != self.Y.shape[0]:
            raise ParameterError(f"X 行数 {self.X.shape[0]} 与 Y 行数 {self.Y.shape[0]} 不一致")
        if not np.all(np.isfinite(self.X)):
            raise ParameterError("输入包含非有限值")
        if self.likelihoods is not None:
            self.likelihoods.check_channels(self.D)

    @property
    def N(self):
        return self.X.shape[0]

    @property
    def p(self):
        return self.X.shape[1]

    @property
    def D(self):
        return self.Y.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=int)
        pick = lambda a: None if a is None else a[idx]
        return replace(self, X=self.X[idx], Y=self.Y[idx], mask=self.mask[idx],
                       signal=pick(self.signal), latent=pick(self.latent))

    def channel(self, d):
        """通道 d 的 (X, y)"""
        rows = self.mask[:, d]
        return self.X[rows], self.Y[rows, d]


def generate_toy(spec, seed=0):
    """按玩具函数生成数据, 输出加固定高斯噪声"""
    rng = np.random.default_rng(seed)
    lo, hi = spec.input_range
    x = rng.uniform(lo, hi, spec.N)

    if spec.kind is ToyKind.SINGLE:
        latent = toy_single(x)[:, None]
        A = np.ones((1, 1))
    else:
        latent = np.column_stack([toy_single(x), toy_latent_second(x)])
        A = np.asarray(TOY_MULTI['mixing'], dtype=float)
    signal = latent @ A.T
    noise = np.asarray(spec.noise)
    Y = signal + rng.standard_normal(signal.shape) * noise

    likelihoods = None
    if np.all(noise > 0):
        likelihoods = HeterogeneousModel([LikelihoodSpec.gaussian(s) for s in noise])
    return Dataset(X=x[:, None], Y=Y, mask=np.ones(Y.shape, dtype=bool),
                   likelihoods=likelihoods, signal=signal, latent=latent, mixing=A)


def split_train_test(ds, test_fraction, seed=0):
    """按种子随机划分, 测试集大小 ⌊N·fraction⌋"""
    if not 0 < test_fraction < 1:
        raise ParameterError(f"test_fraction 必须在 (0, 1) 内: {test_fraction}")
    n_test = int(np.floor(ds.N * test_fraction + 1e-9))
    perm = np.random.default_rng(seed).permutation(ds.N)
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])
    return ds.subset(train_idx), ds.subset(test_idx)


# ==================== 分批 ====================

class BatchMode(Enum):
    STREAMING = 'streaming'
    OVERLAPPING = 'overlapping'
    INCREMENTAL = 'incremental'
    ONE_SAMPLE = 'one_sample'
    ASYNC_SWITCHING = 'async_switching'


@dataclass(frozen=True)
class BatchSchedule:
    mode: BatchMode = BatchMode.STREAMING
    T: int = 10
    overlap_fraction: float = 0.2
    seed: int = 0
    warmup: int = 0

    def __post_init__(self):
        if not isinstance(self.mode, BatchMode):
            object.__setattr__(self, 'mode', BatchMode(self.mode))
        if self.T < 1:
            raise ParameterError(f"T 必须 ≥ 1: {self.T}")
        if not 0 <= self.overlap_fraction < 1:
            raise ParameterError(f"overlap_fraction 必须在 [0, 1) 内: {self.overlap_fraction}")
        if self.warmup < 0:
            raise ParameterError("warmup 不能为负")

    @classmethod
    def from_dict(cls, d):
        return cls(BatchMode(d.get('mode', 'streaming')), int(d.get('T', 10)),
                   float(d.get('overlap_fraction', 0.2)), int(d.get('seed', 0)),
                   int(d.get('warmup', 0)))


@dataclass
class ChannelBatch:
    """一批数据, 每个通道一组 (X_d, y_d), 缺失通道为 None"""
    X: list
    y: list
    region: int = 0
    bounds: tuple = None
    indices: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.X) != len(self.y):
            raise ParameterError("X 与 y 的通道数不一致")
        if not any(X is not None and len(X) > 0 for X in self.X):
            raise ParameterError("批数据至少需要一个非空通道")

    @property
    def D(self):
        return len(self.X)

    @property
    def present(self):
        return np.array([X is not None and len(X) > 0 for X in self.X])

    @property
    def n_points(self):
        return sum(len(X) for X in self.X if X is not None)

    def single(self):
        """单输出批: (X, y)"""
        return self.X[0], self.y[0]


def _make_batch(ds, idx, region, channels=None):
    idx = np.sort(np.asarray(idx, dtype=int))
    Xs, ys = [], []
    for d in range(ds.D):
        rows = idx[ds.mask[idx, d]]
        if (channels is not None and d not in channels) or rows.size == 0:
            Xs.append(None)
            ys.append(None)
        else:
            Xs.append(ds.X[rows])
            ys.append(ds.Y[rows, d])
    bounds = (float(ds.X[idx, 0].min()), float(ds.X[idx, 0].max())) if idx.size else None
    return ChannelBatch(Xs, ys, region, bounds, list(idx))


def _chunks(n, T):
    return np.array_split(np.arange(n), T)


def schedule_batches(ds, sched):
    """按模式把训练集切成有序的批序列"""
    if sched.T > ds.N:
        raise ParameterError(f"T={sched.T} 大于数据量 N={ds.N}")
    rng = np.random.default_rng(sched.seed)
    order = np.argsort(ds.X[:, 0], kind='stable')
    mode = sched.mode

    if mode is BatchMode.STREAMING:
        return [_make_batch(ds, order[c], t) for t, c in enumerate(_chunks(ds.N, sched.T))]

    if mode is BatchMode.OVERLAPPING:
        parts = [list(order[c]) for c in _chunks(ds.N, sched.T)]
        # 从相邻上一段随机抽取部分观测移入本段, 观测不重复
        for t in range(sched.T - 1, 0, -1):
            prev = parts[t - 1]
            k = int(round(sched.overlap_fraction * len(prev)))
            k = min(k, len(prev) - 1)
            if k <= 0:
                continue
            moved = set(rng.choice(prev, size=k, replace=False).tolist())
            parts[t - 1] = [i for i in prev if i not in moved]
            parts[t] = parts[t] + sorted(moved)
        batches = [_make_batch(ds, p, t) for t, p in enumerate(parts)]
        # 区域边界仍按原始连续段
        for b, c in zip(batches, _chunks(ds.N, sched.T)):
            b.bounds = (float(ds.X[order[c[0]], 0]), float(ds.X[order[c[-1]], 0]))
        return batches

    if mode is BatchMode.INCREMENTAL:
        perm = rng.permutation(ds.N)
        return [_make_batch(ds, perm[c], t) for t, c in enumerate(_chunks(ds.N, sched.T))]

    if mode is BatchMode.ONE_SAMPLE:
        if sched.warmup + sched.T > ds.N:
            raise ParameterError(f"warmup+T={sched.warmup + sched.T} 大于 N={ds.N}")
        batches = []
        if sched.warmup:
            batches.append(_make_batch(ds, order[:sched.warmup], 0))
        for i in range(sched.warmup, sched.warmup + sched.T):
            batches.append(_make_batch(ds, order[i:i + 1], len(batches)))
        return batches

    if ds.D < 2:
        raise ParameterError("通道交替模式需要 D ≥ 2")
    return [_make_batch(ds, order[c], t, channels={t % ds.D})
            for t, c in enumerate(_chunks(ds.N, sched.T))]


def assign_regions(batches, X_test, mode, seed=0):
    """
    每个测试点归属唯一的区域 (批次下标)
    按输入区间划分; 增量模式随机划分; 单样本模式全部归入区域0
    """
    X_test = np.atleast_2d(np.asarray(X_test, dtype=float))
    n = X_test.shape[0]
    T = len(batches)
    if mode is BatchMode.ONE_SAMPLE:
        return np.zeros(n, dtype=int)
    if mode is BatchMode.INCREMENTAL:
        return np.random.default_rng(seed).integers(0, T, n)
    uppers = np.array([b.bounds[1] for b in batches])
    lowers = np.array([b.bounds[0] for b in batches])
    # 相邻区间的中点作为分界
    cuts = 0.5 * (uppers[:-1] + lowers[1:])
    return np.searchsorted(cuts, X_test[:, 0], side='right').astype(int)


# ==================== CSV ====================

@dataclass(frozen=True)
class CsvSchema:
    """列角色: input | output:d | ignore; 变换: none | log1p"""
    inputs: tuple
    outputs: tuple
    transforms: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d):
        columns = d.get('columns', {})
        inputs, outputs = [], {}
        for name, role in columns.items():
            if role == 'input':
                inputs.append(name)
            elif isinstance(role, str) and role.startswith('output'):
                channel = int(role.split(':')[1]) if ':' in role else 0
                outputs[channel] = name
            elif role != 'ignore':
                raise ParameterError(f"列 {name} 的角色未知: {role}")
        if not inputs or not outputs:
            raise ParameterError("至少需要一个输入列和一个输出列")
        if sorted(outputs) != list(range(len(outputs))):
            raise ParameterError(f"输出通道编号必须从0连续: {sorted(outputs)}")
        transforms = dict(d.get('transforms', {}))
        for name, tr in transforms.items():
            if tr not in ('none', 'log1p'):
                raise ParameterError(f"列 {name} 的变换未知: {tr}")
        return cls(tuple(inputs), tuple(outputs[c] for c in sorted(outputs)), transforms)


def _parse_column(raw, name, allow_missing):
    values = pd.to_numeric(raw, errors='coerce')
    bad = values.isna() & raw.notna() & (raw.astype(str).str.strip() != '')
    if not allow_missing:
        bad = bad | raw.isna()
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        # +2: 表头占一行, 行号从1开始
        raise IngestionError(f"无法解析 {name} 第{row + 2}行: {raw.iloc[row]!r}",
                             row=row + 2, column=name)
    return values.to_numpy(dtype=float)


def load_csv(path, schema, likelihoods=None):
    """读取CSV为Dataset, 输出列可以有空值 (视为该通道缺失)"""
    if not os.path.exists(path):
        raise IngestionError(f"文件不存在: {path}")
    try:
        df = pd.read_csv(path, dtype=str, encoding='utf-8', keep_default_na=True)
    except (pd.errors.ParserError, UnicodeDecodeError, pd.errors.EmptyDataError) as e:
        raise IngestionError(f"读取失败 {path}: {e}") from e

    for name in schema.inputs + schema.outputs:
        if name not in df.columns:
            raise IngestionError(f"缺少列: {name}", column=name)

    def transform(name, values):
        if schema.transforms.get(name, 'none') != 'log1p':
            return values
        invalid = values < -1
        if np.any(invalid):
            row = int(np.flatnonzero(invalid)[0])
            raise IngestionError(f"log1p 输入小于-1: {name} 第{row + 2}行", row=row + 2, column=name)
        return np.log1p(values)

    X = np.column_stack([transform(c, _parse_column(df[c], c, False)) for c in schema.inputs])
    Y = np.column_stack([transform(c, _parse_column(df[c], c, True)) for c in schema.outputs])
    mask = ~np.isnan(Y)
    logger.info(f"✓ CSV: {os.path.basename(path)} N={X.shape[0]} p={X.shape[1]} D={Y.shape[1]}")
    return Dataset(X=X, Y=Y, mask=mask, likelihoods=likelihoods)


# ==================== 数据获取器 ====================

class DataFetcher:
    """按实验配置取得数据集, 失败记录在 errors 中"""

    def __init__(self, data_dir='.'):
        self.data_dir = data_dir
        self.errors = []

    def _resolve(self, path):
        return path if os.path.isabs(path) else os.path.join(self.data_dir, path)

    def fetch(self, dataset_cfg, likelihoods=None, seed=0):
        kind = dataset_cfg.get('kind', 'toy')
        if kind == 'toy':
            ds = generate_toy(ToySpec.from_dict(dataset_cfg), seed)
            if likelihoods is not None:
                ds.likelihoods = likelihoods
            return ds
        if kind == 'csv':
            try:
                return load_csv(self._resolve(dataset_cfg['path']),
                                CsvSchema.from_dict(dataset_cfg['schema']), likelihoods)
            except IngestionError as e:
                self.errors.append(f"CSV {dataset_cfg.get('path')}: {e}")
                logger.error(f"✗ {e}")
                raise
        raise ParameterError(f"未知的数据类型: {kind}")
