import numpy as np
import pytest

from data_fetcher import (
    BatchMode, BatchSchedule, ChannelBatch, CsvSchema, DataFetcher, Dataset, ToyKind, ToySpec,
    assign_regions, generate_toy, load_csv, schedule_batches, split_train_test, toy_single,
)
from errors import IngestionError, ParameterError


def line_dataset(N, D=1):
    x = np.linspace(0, 1, N)
    Y = np.column_stack([x + d for d in range(D)])
    return Dataset(X=x[:, None], Y=Y, mask=np.ones_like(Y, dtype=bool))


class TestToyData:

    def test_reference_value(self):
        assert toy_single(0.0) == pytest.approx(-0.881966, abs=1e-6)

    def test_noise_free_single(self):
        ds = generate_toy(ToySpec(ToyKind.SINGLE, 50, (0.0,)), seed=1)
        np.testing.assert_array_equal(ds.Y, ds.signal)
        np.testing.assert_array_equal(ds.signal, ds.latent)
        assert ds.likelihoods is None

    def test_multi_mixing(self):
        ds = generate_toy(ToySpec(ToyKind.MULTI, 40, (0.0, 0.0)), seed=2)
        u1, u2 = ds.latent[:, 0], ds.latent[:, 1]
        np.testing.assert_allclose(ds.signal[:, 1], -0.1 * u1 + 0.6 * u2, atol=1e-12)
        np.testing.assert_allclose(ds.signal[:, 0], -0.5 * u1 + 0.1 * u2, atol=1e-12)

    def test_defaults_and_noise(self):
        ds = generate_toy(ToySpec(), seed=0)
        assert ds.N == 2000 and ds.D == 1
        assert ds.likelihoods[0].noise_std == 1.5
        assert np.all((ds.X >= 0) & (ds.X <= 1))

    def test_invalid_spec(self):
        with pytest.raises(ParameterError):
            ToySpec(ToyKind.MULTI, 10, (1.0,))
        with pytest.raises(ParameterError):
            ToySpec(ToyKind.SINGLE, 10, (-1.0,))
        with pytest.raises(ParameterError):
            ToySpec(ToyKind.SINGLE, 0, (1.0,))


class TestSplit:

    def test_sizes(self):
        train, test = split_train_test(line_dataset(4), 0.5, seed=0)
        assert train.N == 2 and test.N == 2
        train, test = split_train_test(line_dataset(2000), 0.33, seed=0)
        assert test.N == 660 and train.N == 1340

    def test_disjoint_and_deterministic(self):
        ds = line_dataset(100)
        a_train, a_test = split_train_test(ds, 0.3, seed=5)
        b_train, b_test = split_train_test(ds, 0.3, seed=5)
        np.testing.assert_array_equal(a_test.X, b_test.X)
        assert not set(a_train.X.ravel()) & set(a_test.X.ravel())

    def test_invalid_fraction(self):
        with pytest.raises(ParameterError):
            split_train_test(line_dataset(10), 1.0)


class TestSchedules:

    def test_streaming(self):
        ds = line_dataset(2000)
        batches = schedule_batches(ds, BatchSchedule(BatchMode.STREAMING, 10))
        assert [b.n_points for b in batches] == [200] * 10
        seen = np.concatenate([b.X[0].ravel() for b in batches])
        np.testing.assert_array_equal(seen, ds.X.ravel())
        for a, b in zip(batches, batches[1:]):
            assert a.bounds[1] < b.bounds[0]

    def test_overlapping(self):
        ds = line_dataset(100)
        batches = schedule_batches(ds, BatchSchedule(BatchMode.OVERLAPPING, 5, 0.2, seed=1))
        all_x = np.concatenate([b.X[0].ravel() for b in batches])
        assert all_x.size == 100 and np.unique(all_x).size == 100
        for t in range(1, 5):
            x = batches[t].X[0].ravel()
            lo, hi = batches[t - 1].bounds
            assert np.any((x >= lo) & (x <= hi))

    def test_incremental_spans_domain(self):
        ds = line_dataset(2000)
        for b in schedule_batches(ds, BatchSchedule(BatchMode.INCREMENTAL, 10, seed=3)):
            assert b.X[0].min() < 0.2 and b.X[0].max() > 0.8

    def test_one_sample(self):
        ds = line_dataset(5)
        batches = schedule_batches(ds, BatchSchedule(BatchMode.ONE_SAMPLE, 5))
        assert [b.n_points for b in batches] == [1] * 5

    def test_one_sample_with_warmup(self):
        ds = line_dataset(10)
        batches = schedule_batches(ds, BatchSchedule(BatchMode.ONE_SAMPLE, 4, warmup=3))
        assert [b.n_points for b in batches] == [3, 1, 1, 1, 1]
        with pytest.raises(ParameterError):
            schedule_batches(ds, BatchSchedule(BatchMode.ONE_SAMPLE, 8, warmup=3))

    def test_async_switching(self):
        ds = line_dataset(40, D=2)
        batches = schedule_batches(ds, BatchSchedule(BatchMode.ASYNC_SWITCHING, 4))
        assert [list(b.present) for b in batches] == [[True, False], [False, True]] * 2
        with pytest.raises(ParameterError):
            schedule_batches(line_dataset(40), BatchSchedule(BatchMode.ASYNC_SWITCHING, 4))

    def test_too_many_batches(self):
        with pytest.raises(ParameterError):
            schedule_batches(line_dataset(5), BatchSchedule(BatchMode.STREAMING, 6))

    def test_deterministic(self):
        ds = line_dataset(50)
        sched = BatchSchedule(BatchMode.INCREMENTAL, 5, seed=9)
        a, b = schedule_batches(ds, sched), schedule_batches(ds, sched)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.X[0], y.X[0])

    def test_missing_outputs_drop_channel_rows(self):
        ds = line_dataset(10, D=2)
        ds.mask[:5, 1] = False
        batch = schedule_batches(ds, BatchSchedule(BatchMode.STREAMING, 2))[0]
        assert batch.X[1] is None and batch.X[0].shape == (5, 1)

    def test_invalid_schedule(self):
        with pytest.raises(ParameterError):
            BatchSchedule(T=0)
        with pytest.raises(ParameterError):
            BatchSchedule(overlap_fraction=1.0)
        with pytest.raises(ParameterError):
            ChannelBatch([None], [None])


class TestRegions:

    def test_streaming_regions_follow_bounds(self):
        ds = line_dataset(100)
        batches = schedule_batches(ds, BatchSchedule(BatchMode.STREAMING, 4))
        X_test = np.array([[0.0], [0.3], [0.6], [0.99]])
        np.testing.assert_array_equal(assign_regions(batches, X_test, BatchMode.STREAMING),
                                      [0, 1, 2, 3])

    def test_one_sample_single_region(self):
        ds = line_dataset(10)
        batches = schedule_batches(ds, BatchSchedule(BatchMode.ONE_SAMPLE, 5))
        assert np.all(assign_regions(batches, np.random.rand(7, 1), BatchMode.ONE_SAMPLE) == 0)

    def test_incremental_random_but_seeded(self):
        ds = line_dataset(100)
        batches = schedule_batches(ds, BatchSchedule(BatchMode.INCREMENTAL, 4))
        X_test = np.linspace(0, 1, 50)[:, None]
        a = assign_regions(batches, X_test, BatchMode.INCREMENTAL, seed=2)
        np.testing.assert_array_equal(a, assign_regions(batches, X_test, BatchMode.INCREMENTAL, seed=2))
        assert set(a) <= {0, 1, 2, 3}


class TestCsv:

    SCHEMA = CsvSchema.from_dict({'columns': {'x': 'input', 'y': 'output:0'}})

    def test_basic(self, tmp_path):
        path = tmp_path / 'data.csv'
        path.write_text('x,y\n0.1,1.0\n0.2,2.0\n0.3,3.0\n', encoding='utf-8')
        ds = load_csv(str(path), self.SCHEMA)
        assert (ds.N, ds.p, ds.D) == (3, 1, 1)
        np.testing.assert_array_equal(ds.Y.ravel(), [1.0, 2.0, 3.0])

    def test_log1p(self, tmp_path):
        path = tmp_path / 'solar.csv'
        path.write_text('t,flux\n0,0\n1,99\n', encoding='utf-8')
        schema = CsvSchema.from_dict({'columns': {'t': 'input', 'flux': 'output:0'},
                                      'transforms': {'flux': 'log1p'}})
        ds = load_csv(str(path), schema)
        np.testing.assert_allclose(ds.Y.ravel(), [0.0, 4.60517], atol=1e-5)

    def test_parse_failure_reports_position(self, tmp_path):
        path = tmp_path / 'bad.csv'
        path.write_text('x,y\n0.1,1.0\nabc,2.0\n', encoding='utf-8')
        with pytest.raises(IngestionError) as info:
            load_csv(str(path), self.SCHEMA)
        assert info.value.row == 3 and info.value.column == 'x'

    def test_missing_output_is_masked(self, tmp_path):
        path = tmp_path / 'gaps.csv'
        path.write_text('x,a,b\n0.1,1.0,\n0.2,,2.0\n', encoding='utf-8')
        schema = CsvSchema.from_dict({'columns': {'x': 'input', 'a': 'output:0', 'b': 'output:1'}})
        ds = load_csv(str(path), schema)
        np.testing.assert_array_equal(ds.mask, [[True, False], [False, True]])

    def test_missing_input_value(self, tmp_path):
        path = tmp_path / 'gaps.csv'
        path.write_text('x,y\n,1.0\n', encoding='utf-8')
        with pytest.raises(IngestionError):
            load_csv(str(path), self.SCHEMA)

    def test_missing_file_and_column(self, tmp_path):
        with pytest.raises(IngestionError):
            load_csv(str(tmp_path / 'nope.csv'), self.SCHEMA)
        path = tmp_path / 'cols.csv'
        path.write_text('x,z\n0.1,1.0\n', encoding='utf-8')
        with pytest.raises(IngestionError) as info:
            load_csv(str(path), self.SCHEMA)
        assert info.value.column == 'y'

    def test_schema_validation(self):
        with pytest.raises(ParameterError):
            CsvSchema.from_dict({'columns': {'x': 'input'}})
        with pytest.raises(ParameterError):
            CsvSchema.from_dict({'columns': {'x': 'input', 'y': 'weird'}})
        with pytest.raises(ParameterError):
            CsvSchema.from_dict({'columns': {'x': 'input', 'y': 'output:1'}})

    def test_fetcher_records_errors(self, tmp_path):
        fetcher = DataFetcher(str(tmp_path))
        cfg = {'kind': 'csv', 'path': 'missing.csv',
               'schema': {'columns': {'x': 'input', 'y': 'output:0'}}}
        with pytest.raises(IngestionError):
            fetcher.fetch(cfg)
        assert len(fetcher.errors) == 1

    def test_fetcher_toy(self):
        ds = DataFetcher().fetch({'kind': 'toy', 'which': 'multi', 'N': 30}, seed=1)
        assert ds.D == 2 and ds.N == 30
