import copy
import glob
import os

import numpy as np
import pytest

import harness
import mogp
import sogp
from errors import ConfigError, NumericalError
from harness import ExperimentConfig, load_config, prepare_stream, run_experiment

CONFIG_DIR = os.path.join(os.path.dirname(__file__), '..', 'configs')

TINY = {
    'name': 'tiny',
    'dataset': {'kind': 'toy', 'which': 'single', 'N': 60},
    'test_fraction': 0.3,
    'model': {
        'type': 'single',
        'kernels': [{'family': 'rbf', 'lengthscale': 0.1, 'amplitude': 1.0}],
        'likelihoods': [{'family': 'gaussian', 'sigma': 1.5}],
    },
    'schedule': {'mode': 'streaming', 'T': 3},
    'inducing': {'rule': 'constant', 'M': 4},
    'optimizer': {'max_iters': 20},
    'metrics': {'nlpd_samples': 50, 'replicas': 2, 'curve_points': 10},
    'seed': 0,
}

TINY_MULTI = dict(
    TINY,
    name='tiny_multi',
    dataset={'kind': 'toy', 'which': 'multi', 'N': 60},
    model={
        'type': 'multi', 'Q': 2,
        'kernels': [{'family': 'rbf', 'lengthscale': 0.1, 'amplitude': 1.0}] * 2,
        'likelihoods': [{'family': 'gaussian', 'sigma': 1.0}, {'family': 'gaussian', 'sigma': 2.0}],
        'mixing_init': 'carry',
    },
    schedule={'mode': 'async_switching', 'T': 2},
    metrics={'nlpd_samples': 20, 'replicas': 1, 'curve_points': 5},
)


def tiny(**overrides):
    d = copy.deepcopy(TINY)
    d.update(overrides)
    return ExperimentConfig.from_dict(d)


class TestConfig:

    def test_presets_load(self):
        paths = sorted(glob.glob(os.path.join(CONFIG_DIR, '*.json')))
        assert len(paths) == 9
        for path in paths:
            cfg = load_config(path)
            assert cfg.name == os.path.splitext(os.path.basename(path))[0]

    def test_csv_presets_documented(self):
        with open(os.path.join(CONFIG_DIR, '..', 'README.md'), encoding='utf-8') as f:
            guide = f.read().split('## 📂 数据准备')[1].split('## 输出文件')[0]
        for path in sorted(glob.glob(os.path.join(CONFIG_DIR, '*.json'))):
            cfg = load_config(path)
            if cfg.dataset.get('kind', 'toy') != 'csv':
                continue
            assert f"### {os.path.basename(cfg.dataset['path'])}" in guide
            for column, role in cfg.dataset['schema']['columns'].items():
                assert f"| `{column}` | `{role}` |" in guide

    def test_defaults(self):
        cfg = tiny()
        assert cfg.schedule.seed == 0 and cfg.vem is None and not cfg.checkpoint
        assert cfg.D == 1 and not cfg.is_multi

    @pytest.mark.parametrize('mutate, key', [
        (lambda d: d.pop('model'), 'model'),
        (lambda d: d['model'].update(type='tree'), 'model'),
        (lambda d: d['model']['likelihoods'].append({'family': 'poisson'}), 'model'),
        (lambda d: d['model'].update(hyper_init='warm'), 'model.hyper_init'),
        (lambda d: d['model']['kernels'][0].update(lengthscale=-1), 'model.kernels'),
        (lambda d: d.update(test_fraction=1.5), 'test_fraction'),
        (lambda d: d.update(inducing='nope'), 'inducing'),
        (lambda d: d['optimizer'].update(method='newton'), 'optimizer'),
        (lambda d: d['metrics'].update(replicas=0), 'metrics'),
        (lambda d: d['schedule'].update(mode='async_switching'), 'schedule.mode'),
        (lambda d: d['dataset'].update(kind='parquet'), 'dataset'),
    ])
    def test_errors_name_the_key(self, mutate, key):
        d = copy.deepcopy(TINY)
        mutate(d)
        with pytest.raises(ConfigError) as info:
            ExperimentConfig.from_dict(d)
        assert info.value.key == key

    def test_unreadable_file(self, tmp_path):
        path = tmp_path / 'broken.json'
        path.write_text('{not json', encoding='utf-8')
        with pytest.raises(ConfigError):
            load_config(str(path))

    def test_toy_channel_count(self):
        d = copy.deepcopy(TINY_MULTI)
        d['dataset']['which'] = 'single'
        with pytest.raises(ConfigError) as info:
            ExperimentConfig.from_dict(d)
        assert info.value.key == 'model.likelihoods'


class TestStream:

    def test_shared_split(self):
        stream = prepare_stream(tiny())
        assert stream.test.N == 18 and stream.train.N == 42
        assert len(stream.batches) == 3
        assert set(stream.regions) <= {0, 1, 2}

    def test_schedule_error_is_config_error(self):
        d = copy.deepcopy(TINY)
        d['schedule']['T'] = 100
        with pytest.raises(ConfigError) as info:
            prepare_stream(ExperimentConfig.from_dict(d))
        assert info.value.key == 'schedule'


class TestRunExperiment:

    def test_files_and_rows(self, tmp_path):
        result = run_experiment(tiny(), out_dir=str(tmp_path))
        names = sorted(os.path.basename(p) for p in result.paths)
        assert names == ['curves_t1.csv', 'curves_t2.csv', 'curves_t3.csv',
                         'report.csv', 'report.json', 'timing.json']
        df = result.report
        assert sorted(df['step'].unique()) == [0, 1, 2]
        assert (df['replicas_ok'] == 2).all()
        assert (df['n_inducing'] == 4).all()
        globals_ = df[df['kind'] == 'global'].set_index('step')['n_test']
        per_region = df[df['kind'].isin(['new', 'old'])].groupby('step')['n_test'].sum()
        assert (globals_ == per_region).all()
        assert not result.all_aborted and result.n_aborted == 0
        curves = np.genfromtxt(tmp_path / 'curves_t1.csv', delimiter=',', names=True)
        assert curves.dtype.names == ('x', 'mean_0', 'lower_0', 'upper_0')

    def test_deterministic(self, tmp_path):
        run_experiment(tiny(), out_dir=str(tmp_path / 'a'))
        run_experiment(tiny(), out_dir=str(tmp_path / 'b'))
        assert (tmp_path / 'a' / 'report.csv').read_bytes() == (tmp_path / 'b' / 'report.csv').read_bytes()

    def test_no_write(self, tmp_path):
        result = run_experiment(tiny(), out_dir=str(tmp_path / 'none'), write=False)
        assert result.paths == [] and not (tmp_path / 'none').exists()

    def test_numerical_abort(self, tmp_path, monkeypatch):
        def boom(*args, **kwargs):
            raise NumericalError("分解失败", condition=1e18)

        monkeypatch.setattr(harness, 'continual_step', boom)
        result = run_experiment(tiny(), out_dir=str(tmp_path))
        assert result.all_aborted and result.report.empty
        assert [r.error['step'] for r in result.replicas] == [0, 0]

    @pytest.mark.parametrize('config', [TINY, TINY_MULTI])
    def test_bound_failure_aborts_replica(self, tmp_path, monkeypatch, config):
        def broken(*args, **kwargs):
            raise NumericalError("积分出现非有限值")

        monkeypatch.setattr(sogp, 'variational_expectation', broken)
        monkeypatch.setattr(mogp, 'variational_expectation', broken)
        result = run_experiment(ExperimentConfig.from_dict(config), out_dir=str(tmp_path))
        assert result.all_aborted and result.report.empty
        assert all(r.error['step'] == 0 for r in result.replicas)

    def test_partial_abort(self, tmp_path, monkeypatch):
        real = harness.continual_step

        def flaky(model, *args, **kwargs):
            if model.steps_done == 1 and kwargs.get('seed', args[-1]) >= 1000:
                raise NumericalError("副本1失败")
            return real(model, *args, **kwargs)

        monkeypatch.setattr(harness, 'continual_step', flaky)
        result = run_experiment(tiny(), out_dir=str(tmp_path))
        assert result.n_aborted == 1 and not result.all_aborted
        step1 = result.report[result.report['step'] == 1]
        assert (step1['replicas_ok'] == 1).all()

    def test_resume_from_checkpoint(self, tmp_path, monkeypatch):
        cfg = tiny(checkpoint=True, metrics={'nlpd_samples': 50, 'replicas': 1, 'curve_points': 10})
        real = harness.continual_step

        def stop_at_third(model, *args, **kwargs):
            if model.steps_done == 2:
                raise NumericalError("中断")
            return real(model, *args, **kwargs)

        monkeypatch.setattr(harness, 'continual_step', stop_at_third)
        first = run_experiment(cfg, out_dir=str(tmp_path))
        assert len(first.replicas[0].reports) == 2
        assert len(glob.glob(str(tmp_path / 'checkpoints' / 'replica0_step*.json'))) == 2

        monkeypatch.setattr(harness, 'continual_step', real)
        resumed = run_experiment(cfg, out_dir=str(tmp_path), resume=True)
        reports = resumed.replicas[0].reports
        assert [r.step for r in reports] == [2]
        assert reports[0].n_inducing == 4

    def test_multi_output_async(self, tmp_path):
        result = run_experiment(ExperimentConfig.from_dict(TINY_MULTI), out_dir=str(tmp_path))
        df = result.report
        assert set(df['channel']) == {0, 1}
        assert not result.all_aborted
        curves = np.genfromtxt(tmp_path / 'curves_t2.csv', delimiter=',', names=True)
        assert curves.dtype.names == ('x', 'mean_0', 'lower_0', 'upper_0',
                                      'mean_1', 'lower_1', 'upper_1')
