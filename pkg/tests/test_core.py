import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import bsforest as bf
from bsforest.core import hyperparams_from_mapping, load_matrix_csv, parse_config_file


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


class TestLoadCsv:
    def test_basic(self, tmp_path):
        path = write(tmp_path, "d.csv", "0,1\n1,3\n2,5\n")
        ds = bf.load_csv(path)
        assert len(ds) == 3 and ds.dim == 1
        assert ds.target_bound == 5.0
        assert list(ds.targets) == [1.0, 3.0, 5.0]

    def test_header_skip(self, tmp_path):
        path = write(tmp_path, "d.csv", "x,y\n0.5,0.2\n")
        ds = bf.load_csv(path, has_header=True)
        assert len(ds) == 1 and ds.dim == 1 and ds.target_bound == 0.2

    def test_malformed_row_reports_number(self, tmp_path):
        path = write(tmp_path, "d.csv", "0,abc\n")
        with pytest.raises(bf.DataFormatError, match="row 1"):
            bf.load_csv(path)

    def test_inconsistent_width(self, tmp_path):
        path = write(tmp_path, "d.csv", "0,1\n1,2,3\n")
        with pytest.raises(bf.DataFormatError, match="row 2"):
            bf.load_csv(path)

    def test_empty_file(self, tmp_path):
        path = write(tmp_path, "d.csv", "")
        with pytest.raises(bf.DataFormatError, match="no data rows"):
            bf.load_csv(path)

    def test_non_finite_rejected(self, tmp_path):
        path = write(tmp_path, "d.csv", "0,nan\n")
        with pytest.raises(bf.DataFormatError, match="row 1"):
            bf.load_csv(path)

    def test_row_order_preserved(self, tmp_path):
        path = write(tmp_path, "d.csv", "3,0\n1,0\n2,0\n")
        ds = bf.load_csv(path)
        assert list(ds.features[:, 0]) == [3.0, 1.0, 2.0]

    def test_roundtrip_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        values = rng.standard_normal((20, 3))
        rows = "\n".join(",".join(repr(float(v)) for v in row) for row in values)
        ds = bf.load_csv(write(tmp_path, "d.csv", rows + "\n"))
        back = "\n".join(
            ",".join(repr(float(v)) for v in list(ds.features[i]) + [ds.targets[i]])
            for i in range(len(ds))
        )
        ds2 = bf.load_csv(write(tmp_path, "d2.csv", back + "\n"))
        assert np.array_equal(ds.features, ds2.features)
        assert np.array_equal(ds.targets, ds2.targets)

    def test_matrix_loader_allows_empty(self, tmp_path):
        header, mat = load_matrix_csv(write(tmp_path, "d.csv", "x,y\n"), has_header=True)
        assert header == ["x", "y"] and mat.shape[0] == 0


class TestDataset:
    def test_target_bound_validates(self):
        with pytest.raises(bf.ValidationError):
            bf.Dataset(np.zeros((2, 1)), np.array([1.0, -3.0]), target_bound=2.0)

    def test_rejects_nan(self):
        with pytest.raises(bf.ValidationError):
            bf.Dataset(np.array([[np.nan]]), np.array([1.0]))

    def test_subset_keeps_bound(self):
        ds = bf.Dataset(np.zeros((3, 1)), np.array([1.0, -5.0, 2.0]))
        sub = ds.subset([0, 2])
        assert sub.target_bound == 5.0

    def test_arrays_locked(self):
        ds = bf.Dataset(np.zeros((2, 1)), np.array([1.0, 2.0]))
        with pytest.raises(ValueError):
            ds.features[0, 0] = 9.0

    def test_samples_iteration(self):
        ds = bf.Dataset(np.array([[1.0], [2.0]]), np.array([3.0, 4.0]))
        samples = list(ds.samples)
        assert samples[1].target == 4.0 and samples[0].features[0] == 1.0


class TestTrainTestSplit:
    def test_seventy_thirty(self):
        ds = bf.Dataset(np.arange(10, dtype=float)[:, None], np.arange(10, dtype=float) + 1)
        tr, te = bf.train_test_split(ds, 0.3, bf.RandomStream(0))
        assert (len(tr), len(te)) == (7, 3)

    def test_two_rows(self):
        ds = bf.Dataset(np.arange(2, dtype=float)[:, None], np.ones(2))
        tr, te = bf.train_test_split(ds, 0.5, bf.RandomStream(0))
        assert (len(tr), len(te)) == (1, 1)

    def test_same_seed_identical(self):
        ds = bf.Dataset(np.arange(20, dtype=float)[:, None], np.arange(20, dtype=float) + 1)
        a = bf.train_test_split(ds, 0.25, bf.RandomStream(42))
        b = bf.train_test_split(ds, 0.25, bf.RandomStream(42))
        assert np.array_equal(a[0].features, b[0].features)
        assert np.array_equal(a[1].targets, b[1].targets)

    def test_union_is_input_multiset(self):
        ds = bf.Dataset(np.arange(11, dtype=float)[:, None], np.arange(11, dtype=float) + 1)
        tr, te = bf.train_test_split(ds, 0.4, bf.RandomStream(5))
        merged = sorted(np.concatenate([tr.targets, te.targets]))
        assert merged == sorted(ds.targets)

    def test_degenerate_raises(self):
        ds = bf.Dataset(np.arange(2, dtype=float)[:, None], np.ones(2))
        with pytest.raises(bf.ValidationError):
            bf.train_test_split(ds, 0.99, bf.RandomStream(0))


class TestMse:
    def test_identity(self):
        assert bf.mse([1.0, 1.0], [1.0, 1.0]) == 0.0

    def test_hand_arithmetic(self):
        assert bf.mse([0.0, 2.0], [1.0, 1.0]) == 1.0
        assert bf.mse([3.0], [0.0]) == 9.0

    def test_errors(self):
        with pytest.raises(bf.ValidationError):
            bf.mse([1.0], [1.0, 2.0])
        with pytest.raises(bf.ValidationError):
            bf.mse([], [])

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=40), st.randoms())
    @settings(max_examples=50, deadline=None)
    def test_permutation_invariant(self, values, rnd):
        n = len(values)
        preds = np.asarray(values)
        targs = preds[::-1].copy()
        perm = list(range(n))
        rnd.shuffle(perm)
        base = bf.mse(preds, targs)
        permuted = bf.mse(preds[perm], targs[perm])
        assert permuted == pytest.approx(base, rel=1e-12, abs=1e-15)


class TestPenalizedScore:
    def test_examples(self):
        assert bf.penalized_score(0.5, 3, 0.01) == pytest.approx(0.59)
        assert bf.penalized_score(0.2, 0, 5.0) == 0.2
        assert bf.penalized_score(0.0, 2, 0.25) == 1.0

    @given(st.integers(0, 100), st.floats(1e-9, 10.0), st.floats(0, 5.0))
    @settings(max_examples=50, deadline=None)
    def test_strictly_increasing_in_p(self, p, lam, risk):
        assert bf.penalized_score(risk, p + 1, lam) > bf.penalized_score(risk, p, lam)


class TestMaxSplits:
    def test_examples(self):
        assert bf.max_splits(1.0, 0.01) == 10
        assert bf.max_splits(1.0, 4.0) == 0
        assert bf.max_splits(2.0, 0.0001) == 200

    def test_validation(self):
        with pytest.raises(bf.ValidationError):
            bf.max_splits(0.0, 1.0)
        with pytest.raises(bf.ValidationError):
            bf.max_splits(1.0, 0.0)


class TestRandomStream:
    def test_same_key_same_sequence(self):
        a = bf.RandomStream(123, (1, 2, 3)).random(100)
        b = bf.RandomStream(123, (1, 2, 3)).random(100)
        assert np.array_equal(a, b)

    def test_different_paths_differ(self):
        a = bf.RandomStream(123, (1,)).random(50)
        b = bf.RandomStream(123, (2,)).random(50)
        assert not np.array_equal(a, b)

    def test_child_derivation(self):
        a = bf.RandomStream(7).child(4, 5).random(10)
        b = bf.RandomStream(7, (4, 5)).random(10)
        assert np.array_equal(a, b)

    def test_thread_independent(self):
        results = {}

        def work(tag):
            results[tag] = bf.RandomStream(9, (tag,)).random(256)

        threads = [threading.Thread(target=work, args=(i,)) for i in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for i in range(8):
            assert np.array_equal(results[i], bf.RandomStream(9, (i,)).random(256))

    def test_uniform_open_range(self):
        draws = bf.RandomStream(1).uniform_open(10000)
        assert draws.min() > 0.0 and draws.max() < 1.0

    def test_batched_equals_sequential(self):
        batched = bf.RandomStream(3, (1,)).integers(1000, size=64)
        stream = bf.RandomStream(3, (1,))
        sequential = np.array([stream.integers(1000) for _ in range(64)])
        assert np.array_equal(batched, sequential)

    def test_seed_validation(self):
        with pytest.raises(ValueError):
            bf.RandomStream(-1)
        with pytest.raises(ValueError):
            bf.RandomStream(2**64)


class TestHyperParams:
    def test_defaults_valid(self):
        bf.HyperParams().validate()

    def test_one_nn_needs_axis(self):
        p = bf.HyperParams(vacancy_fill="one_nn", geometry="oblique")
        with pytest.raises(bf.ValidationError):
            p.validate()

    def test_empty_grid_rejected(self):
        p = bf.HyperParams(leaf_model="linear", c_grid=())
        with pytest.raises(bf.ValidationError):
            p.validate()

    def test_range_checks(self):
        for bad in (
            dict(trees=0),
            dict(pro=0.0),
            dict(pro=1.5),
            dict(votes=0),
            dict(penalty=0.0),
            dict(holdout_fraction=1.0),
            dict(scoring="other"),
        ):
            with pytest.raises(bf.ValidationError):
                bf.HyperParams(**bad).validate()

    def test_penalty_per_cell(self):
        p = bf.HyperParams(cells=2, penalty_per_cell=(0.1, 0.2))
        p.validate()
        assert p.penalty_for_cell(1) == 0.2
        with pytest.raises(bf.ValidationError):
            bf.HyperParams(cells=3, penalty_per_cell=(0.1,)).validate()

    def test_effective_min_leaf(self):
        assert bf.HyperParams(leaf_model="linear").effective_min_leaf() == 10
        assert (
            bf.HyperParams(leaf_model="gaussian", c_grid=(1.0, 2.0), gamma_grid=(0.1,)).effective_min_leaf()
            == 4
        )
        assert bf.HyperParams(min_leaf_for_model=7).effective_min_leaf() == 7


class TestConfig:
    def test_parse_and_aliases(self, tmp_path):
        cfg = write(
            tmp_path,
            "run.cfg",
            "trees=4\ncells = 3\nlambda=0.5\nseed=99\nc_grid=0.1,1\npure=true\n# comment\n",
        )
        params = hyperparams_from_mapping(parse_config_file(cfg))
        assert params.trees == 4 and params.cells == 3
        assert params.penalty == 0.5 and params.master_seed == 99
        assert params.c_grid == (0.1, 1.0) and params.pure is True

    def test_per_cell_lambda(self, tmp_path):
        cfg = write(tmp_path, "run.cfg", "cells=2\nlambda_per_cell=0.1,0.4\n")
        params = hyperparams_from_mapping(parse_config_file(cfg))
        params.validate()
        assert params.penalty_per_cell == (0.1, 0.4)

    def test_unknown_key(self):
        with pytest.raises(bf.DataFormatError, match="unknown config key"):
            hyperparams_from_mapping({"bogus": "1"})

    def test_bad_value(self):
        with pytest.raises(bf.DataFormatError, match="cannot parse"):
            hyperparams_from_mapping({"trees": "many"})
