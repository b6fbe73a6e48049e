"""
连续高斯过程 - 快照检查点模块
后验快照以JSON保存, 用于流式实验的断点续跑
"""
import glob
import json
import logging
import os
import re

import numpy as np

from config import SNAPSHOT_SCHEMA_VERSION
from errors import ParameterError
from math_core import Kernel
from variational_state import GaussianVariational, InducingSet, PosteriorSnapshot

logger = logging.getLogger(__name__)

_NAME = re.compile(r'replica(\d+)_step(\d+)\.json$')


def snapshot_to_dict(snapshot, domain=None):
    """L 按行主序展开"""
    return {
        'schema_version': SNAPSHOT_SCHEMA_VERSION,
        'step': snapshot.step,
        'latents': [
            {
                'Z': Zq.Z.tolist(),
                'mu': qq.mu.tolist(),
                'L': qq.L.ravel(order='C').tolist(),
                'psi': k.to_dict(),
            }
            for Zq, qq, k in zip(snapshot.Z, snapshot.q, snapshot.kernels)
        ],
        'mixing': None if snapshot.mixing is None else snapshot.mixing.tolist(),
        'domain': None if domain is None else [np.asarray(domain[0]).tolist(),
                                                np.asarray(domain[1]).tolist()],
    }


def snapshot_from_dict(d):
    """返回 (PosteriorSnapshot, domain)"""
    version = d.get('schema_version')
    if version != SNAPSHOT_SCHEMA_VERSION:
        raise ParameterError(f"快照版本不支持: {version}")
    Z, q, kernels = [], [], []
    for lat in d['latents']:
        Zq = InducingSet(np.asarray(lat['Z'], dtype=float))
        M = Zq.M
        L = np.asarray(lat['L'], dtype=float).reshape(M, M)
        Z.append(Zq)
        q.append(GaussianVariational(np.asarray(lat['mu'], dtype=float), L))
        kernels.append(Kernel.from_dict(lat['psi']))
    snapshot = PosteriorSnapshot(Z=Z, q=q, kernels=kernels, mixing=d.get('mixing'),
                                 step=int(d['step']))
    domain = d.get('domain')
    if domain is not None:
        domain = (np.asarray(domain[0], dtype=float), np.asarray(domain[1], dtype=float))
    return snapshot, domain


class SnapshotManager:
    """每个副本每一步一个检查点文件"""

    def __init__(self, data_dir='checkpoints'):
        self.data_dir = data_dir
        os.makedirs(data_dir, exist_ok=True)

    def _path(self, replica, step):
        return os.path.join(self.data_dir, f"replica{replica}_step{step}.json")

    def save(self, model, replica=0):
        """保存模型当前后验"""
        snapshot = model.freeze()
        path = self._path(replica, model.steps_done)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(snapshot_to_dict(snapshot, model.domain), f)
        logger.debug(f"✓ 检查点已保存: {path}")
        return path

    def load(self, path):
        with open(path, 'r', encoding='utf-8') as f:
            return snapshot_from_dict(json.load(f))

    def _steps(self, replica):
        steps = []
        for path in glob.glob(os.path.join(self.data_dir, f"replica{replica}_step*.json")):
            match = _NAME.search(path)
            if match and int(match.group(1)) == replica:
                steps.append(int(match.group(2)))
        return sorted(steps)

    def latest(self, replica=0):
        """最新检查点 (snapshot, domain), 没有时返回 None"""
        steps = self._steps(replica)
        if not steps:
            return None
        return self.load(self._path(replica, steps[-1]))

    def get_snapshot_stats(self, replica=0):
        steps = self._steps(replica)
        return {
            'count': len(steps),
            'earliest_step': steps[0] if steps else None,
            'latest_step': steps[-1] if steps else None,
        }
