import numpy as np
import pytest

from conftest import prior_q
from errors import ParameterError
from likelihoods import HeterogeneousModel, LikelihoodSpec
from math_core import Kernel, KernelFamily
from scoring import (
    DriftMonitor, StepReport, classification_error, evaluate_step, nlpd, point_log_densities,
    predict_marginals,
)
from sogp import SingleOutputModel
from variational_state import GaussianVariational, InducingSet

HALF = np.sqrt(0.5)


def prior_model(likelihood, Z=(10.0, 11.0), amplitude=HALF):
    kernel = Kernel(KernelFamily.RBF, 0.3, amplitude)
    Z = InducingSet(np.asarray(Z, dtype=float)[:, None])
    return SingleOutputModel(kernel=kernel, likelihood=likelihood, Z=Z, q=prior_q(kernel, Z))


def confident_classifier():
    spec = LikelihoodSpec.bernoulli()
    kernel = Kernel(KernelFamily.RBF, 0.1, 1.0)
    Z = InducingSet(np.array([[0.0], [1.0]]))
    q = GaussianVariational(np.array([20.0, -20.0]), 1e-3 * np.eye(2))
    return SingleOutputModel(kernel=kernel, likelihood=spec, Z=Z, q=q), spec


class TestNlpd:

    def test_prior_gaussian(self):
        # 诱导点远离测试点: 预测分布为 N(0, 0.5 + 0.5)
        spec = LikelihoodSpec.gaussian(HALF)
        model = prior_model(spec)
        S = 4000
        value = nlpd(model, np.array([[0.0]]), [0.0], 0, spec, n_samples=S, seed=1)
        assert value == pytest.approx(0.918939, abs=3 / np.sqrt(S))

    def test_confident_classifier(self):
        model, spec = confident_classifier()
        X = np.array([[0.0], [1.0]])
        assert nlpd(model, X, [1.0, 0.0], 0, spec, n_samples=200) < 1e-3

    def test_density_floor(self):
        spec = LikelihoodSpec.gaussian(1e-3)
        model = prior_model(spec)
        logp = point_log_densities(model, np.array([[0.0]]), [100.0], 0, spec, n_samples=50)
        assert logp[0] == pytest.approx(np.log(1e-300))
        assert logp[0] == pytest.approx(-690.7755, abs=1e-3)

    def test_deterministic(self):
        spec = LikelihoodSpec.poisson()
        model = prior_model(spec)
        X = np.linspace(0, 1, 5)[:, None]
        y = [0.0, 1.0, 2.0, 0.0, 3.0]
        assert nlpd(model, X, y, 0, spec, 100, seed=4) == nlpd(model, X, y, 0, spec, 100, seed=4)

    def test_empty(self):
        spec = LikelihoodSpec.gaussian(1.0)
        with pytest.raises(ParameterError):
            nlpd(prior_model(spec), np.zeros((0, 1)), [], 0, spec)

    def test_single_output_channel(self):
        with pytest.raises(ParameterError):
            predict_marginals(prior_model(LikelihoodSpec.gaussian(1.0)), 1, np.zeros((1, 1)))


class TestClassificationError:

    def test_correct_and_flipped(self):
        model, spec = confident_classifier()
        X = np.array([[0.0], [1.0]])
        assert classification_error(model, X, np.array([1.0, 0.0]), 0, spec) == 0.0
        assert classification_error(model, X, np.array([0.0, 1.0]), 0, spec) == 1.0


class TestEvaluateStep:

    def _setup(self):
        spec = LikelihoodSpec.gaussian(HALF)
        model = prior_model(spec)
        X = np.linspace(0, 1, 6)[:, None]
        Y = np.zeros((6, 1))
        mask = np.ones((6, 1), dtype=bool)
        regions = np.array([0, 0, 1, 1, 2, 2])
        return model, X, Y, mask, regions, HeterogeneousModel([spec])

    def test_region_accounting(self):
        model, X, Y, mask, regions, lik = self._setup()
        report = evaluate_step(model, 1, X, Y, mask, regions, lik, n_samples=100)
        by_kind = {r['kind']: r for r in report.rows}
        assert by_kind['new']['region'] == 1 and by_kind['new']['n_test'] == 2
        assert by_kind['old']['region'] == 0 and by_kind['old']['n_test'] == 2
        assert by_kind['global']['n_test'] == 4
        assert by_kind['global']['nlpd'] == pytest.approx(by_kind['new']['nlpd'] + by_kind['old']['nlpd'])
        assert by_kind['global_mean']['nlpd'] == pytest.approx(
            0.5 * (by_kind['new']['nlpd'] + by_kind['old']['nlpd']))
        assert np.isnan(by_kind['new']['error_rate'])

    def test_first_step_has_no_old_rows(self):
        model, X, Y, mask, regions, lik = self._setup()
        report = evaluate_step(model, 0, X, Y, mask, regions, lik, n_samples=50)
        assert [r['kind'] for r in report.rows] == ['new', 'global', 'global_mean']

    def test_masked_channel_is_skipped(self):
        model, X, Y, mask, regions, lik = self._setup()
        mask[:] = False
        assert evaluate_step(model, 2, X, Y, mask, regions, lik, n_samples=10).rows == []

    def test_classification_rows(self):
        model, spec = confident_classifier()
        X = np.array([[0.0], [1.0]])
        Y = np.array([[1.0], [1.0]])
        report = evaluate_step(model, 1, X, Y, np.ones((2, 1), dtype=bool), np.array([0, 1]),
                               HeterogeneousModel([spec]), n_samples=50)
        rates = {r['kind']: r['error_rate'] for r in report.rows}
        assert rates['old'] == 0.0 and rates['new'] == 1.0 and rates['global'] == 0.5


class TestDriftMonitor:

    @staticmethod
    def report(step, kind, value):
        r = StepReport(step=step)
        r.add(0, 0, kind, 10, value)
        return r

    def test_levels(self):
        monitor = DriftMonitor()
        monitor.observe(self.report(0, 'new', 1.0))
        for step, value in enumerate([1.01, 1.07, 1.12], start=1):
            monitor.observe(self.report(step, 'old', value))
        assert [a['level'] for a in monitor.alerts] == ['warning', 'extreme']
        assert monitor.alerts[1]['drift'] == pytest.approx(0.12)
        assert monitor.get_alert_summary() == {'total': 2, 'extreme': 1, 'warning': 1}

    def test_replicas_tracked_separately(self):
        monitor = DriftMonitor()
        monitor.observe(self.report(0, 'new', 1.0), replica=0)
        monitor.observe(self.report(0, 'new', 2.0), replica=1)
        monitor.observe(self.report(1, 'old', 2.0), replica=1)
        assert monitor.alerts == []

    def test_global_rows_ignored(self):
        monitor = DriftMonitor({'extreme': 0.1, 'warning': 0.05})
        monitor.observe(self.report(0, 'global', 1.0))
        monitor.observe(self.report(1, 'global', 5.0))
        assert monitor.get_alert_summary()['total'] == 0
