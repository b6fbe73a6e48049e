import json

import numpy as np
import pytest

from conftest import random_q
from errors import ParameterError
from likelihoods import LikelihoodSpec
from math_core import Kernel, KernelFamily
from snapshot_manager import SnapshotManager, snapshot_from_dict, snapshot_to_dict
from sogp import SingleOutputModel
from variational_state import InducingSet, PosteriorSnapshot


def trained_model(rng, steps_done=3, M=4):
    Z = InducingSet(np.sort(rng.uniform(0, 1, M))[:, None])
    return SingleOutputModel(kernel=Kernel(KernelFamily.MATERN32, 0.25, 1.3),
                             likelihood=LikelihoodSpec.gaussian(0.5), Z=Z, q=random_q(rng, M),
                             domain=(np.array([0.0]), np.array([1.0])), steps_done=steps_done)


class TestSerialisation:

    def test_round_trip_single(self, rng):
        model = trained_model(rng)
        snapshot, domain = snapshot_from_dict(json.loads(json.dumps(
            snapshot_to_dict(model.freeze(), model.domain))))
        np.testing.assert_array_equal(snapshot.Z[0].Z, model.Z.Z)
        np.testing.assert_array_equal(snapshot.q[0].mu, model.q.mu)
        np.testing.assert_array_equal(snapshot.q[0].L, model.q.L)
        assert snapshot.kernels[0] == model.kernel
        assert snapshot.step == 3 and snapshot.mixing is None
        np.testing.assert_array_equal(domain[1], [1.0])

    def test_round_trip_mixing(self, rng):
        Z = [InducingSet(np.linspace(0, 1, 3)[:, None]), InducingSet(np.linspace(0, 1, 2)[:, None])]
        q = [random_q(rng, 3), random_q(rng, 2)]
        kernels = [Kernel(KernelFamily.RBF, 0.2, 1.0), Kernel(KernelFamily.RBF, 0.4, 0.8)]
        A = rng.normal(size=(3, 2))
        snap = PosteriorSnapshot(Z=Z, q=q, kernels=kernels, mixing=A, step=1)
        back, domain = snapshot_from_dict(snapshot_to_dict(snap))
        assert back.Q == 2 and domain is None
        np.testing.assert_array_equal(back.mixing, A)
        np.testing.assert_array_equal(back.q[1].L, q[1].L)

    def test_version_mismatch(self, rng):
        d = snapshot_to_dict(trained_model(rng).freeze())
        d['schema_version'] = 99
        with pytest.raises(ParameterError):
            snapshot_from_dict(d)


class TestSnapshotManager:

    def test_save_load(self, rng, tmp_path):
        manager = SnapshotManager(str(tmp_path / 'ckpt'))
        model = trained_model(rng, steps_done=2)
        path = manager.save(model, replica=1)
        assert path.endswith('replica1_step2.json')
        snapshot, _ = manager.load(path)
        np.testing.assert_array_equal(snapshot.q[0].mu, model.q.mu)

    def test_latest_and_stats(self, rng, tmp_path):
        manager = SnapshotManager(str(tmp_path))
        assert manager.latest(0) is None
        assert manager.get_snapshot_stats(0) == {'count': 0, 'earliest_step': None, 'latest_step': None}
        for step in (1, 2, 10):
            manager.save(trained_model(rng, steps_done=step), replica=0)
        manager.save(trained_model(rng, steps_done=7), replica=1)
        snapshot, _ = manager.latest(0)
        assert snapshot.step == 10
        assert manager.get_snapshot_stats(0) == {'count': 3, 'earliest_step': 1, 'latest_step': 10}
        assert manager.get_snapshot_stats(1)['count'] == 1

    def test_untrained_model(self, tmp_path):
        model = SingleOutputModel(kernel=Kernel(KernelFamily.RBF, 0.3, 1.0),
                                  likelihood=LikelihoodSpec.gaussian(1.0))
        with pytest.raises(ParameterError):
            SnapshotManager(str(tmp_path)).save(model)
