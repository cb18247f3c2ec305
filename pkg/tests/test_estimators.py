import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from knnscale.data import Standardizer
from knnscale.errors import PreconditionError
from knnscale.estimators import (ScaleLocModel, compute_residuals, default_k_grid, fit_mean, fit_variance,
                                 loocv_scores, predict_mean, predict_sd, predict_variance, select_k)


def loocv_oracle(X, r, grid):
    """Definitional double loop: sort the other rows by (distance, index), average, square, sum."""
    X = np.asarray(X, dtype=float).reshape(len(r), -1)
    m = len(r)
    tot = [0.0] * len(grid)
    for i in range(m):
        order = sorted((sum((X[j, c] - X[i, c]) ** 2 for c in range(X.shape[1])), j)
                       for j in range(m) if j != i)
        for g, k in enumerate(grid):
            s = 0.0
            for _, j in order[:k]:
                s += r[j]
            e = r[i] - s / k
            tot[g] += e * e
    return np.array(tot) / m


class TestLoocv:
    def test_three_point_enumeration(self):
        tr = select_k(np.array([[0.0], [1.0], [2.0]]), np.array([0.0, 1.0, 2.0]))
        assert_array_equal(tr.k_grid, [1, 2])
        assert_array_equal(tr.scores, [1.0, 1.5])
        assert tr.chosen == 1

    @pytest.mark.parametrize("c", [0.0, 0.1, -3.7, 1e6])
    def test_constant_response_picks_largest_k(self, c):
        rng = np.random.default_rng(0)
        X = rng.random((40, 2))
        tr = select_k(X, np.full(40, c))
        assert_array_equal(tr.scores, 0.0)
        assert tr.chosen == 39

    def test_singleton_grid(self):
        rng = np.random.default_rng(1)
        assert select_k(rng.random((20, 2)), rng.random(20), [5]).chosen == 5

    @pytest.mark.parametrize("method", ["scan", "tree"])
    def test_matches_double_loop_exactly(self, method):
        rng = np.random.default_rng(2)
        for _ in range(15):
            m, d = int(rng.integers(3, 60)), int(rng.integers(1, 4))
            X = rng.random((m, d))
            r = rng.standard_normal(m)
            grid = np.unique(rng.integers(1, m, size=int(rng.integers(1, 6))))
            assert_array_equal(loocv_scores(X, r, grid, method), loocv_oracle(X, r, grid))

    def test_scan_equals_tree_with_ties(self):
        rng = np.random.default_rng(3)
        X = rng.integers(0, 3, (200, 2)).astype(float)
        r = rng.standard_normal(200)
        grid = np.arange(1, 30)
        assert_array_equal(loocv_scores(X, r, grid, "scan"), loocv_scores(X, r, grid, "tree"))

    @pytest.mark.parametrize("grid", [[], [0, 1], [1, 5], [3, 2]])
    def test_bad_grids(self, grid):
        with pytest.raises(PreconditionError):
            loocv_scores(np.zeros((5, 1)), np.zeros(5), grid)

    def test_default_grid(self):
        assert_array_equal(default_k_grid(5), [1, 2, 3, 4])
        assert_array_equal(default_k_grid(1000), np.arange(1, 1000))
        g = default_k_grid(5000)
        expect = sorted({math.ceil(1.25 ** j) for j in range(60)} & set(range(1, 5000)))
        assert_array_equal(g, expect)

    def test_chosen_attains_minimum_with_largest_tie(self):
        rng = np.random.default_rng(4)
        X = rng.integers(0, 2, (30, 1)).astype(float)
        r = rng.integers(0, 2, 30).astype(float)
        tr = select_k(X, r)
        best = tr.scores.min()
        assert tr.scores[list(tr.k_grid).index(tr.chosen)] == best
        assert all(s > best for k, s in zip(tr.k_grid, tr.scores) if k > tr.chosen)


class TestMean:
    def test_two_neighbour_example(self):
        X = np.array([[0.0], [1.0], [2.0], [4.0]])
        m = fit_mean(X, X[:, 0], [0], 2)
        assert predict_mean(m, [1.2]) == 1.5

    def test_full_neighbourhood_is_global_mean(self):
        rng = np.random.default_rng(0)
        X, y = rng.random((9, 2)), rng.random(9)
        assert_allclose(fit_mean(X, y, [0, 1], 9).predict_batch(rng.random((4, 2))), y.mean(), rtol=1e-15)

    def test_empty_support_is_constant(self):
        y = np.array([1.0, 2.0, 6.0])
        m = fit_mean(np.zeros((3, 2)), y, (), 1)
        assert m.is_constant and m.k == 3
        assert_array_equal(m.predict_batch(np.ones((2, 2))), [3.0, 3.0])

    @given(c=st.floats(-1e6, 1e6), k=st.integers(1, 12))
    @settings(max_examples=40, deadline=None)
    def test_constant_responses(self, c, k):
        X = np.random.default_rng(k).random((12, 2))
        out = fit_mean(X, np.full(12, c), [0, 1], k).predict_batch(np.random.default_rng(0).random((5, 2)))
        assert_array_equal(out, c)

    def test_predictions_within_response_range(self):
        rng = np.random.default_rng(5)
        X, y = rng.random((100, 3)), rng.standard_normal(100)
        p = fit_mean(X, y, [0, 2], 7).predict_batch(rng.random((200, 3)) * 3 - 1)
        assert p.min() >= y.min() and p.max() <= y.max()

    def test_columns_outside_support_ignored(self):
        rng = np.random.default_rng(6)
        X, y = rng.random((50, 3)), rng.random(50)
        m = fit_mean(X, y, [1], 4)
        Q = rng.random((10, 3))
        Q2 = Q.copy()
        Q2[:, [0, 2]] = rng.random((10, 2)) * 100
        assert_array_equal(m.predict_batch(Q), m.predict_batch(Q2))

    def test_row_permutation_invariance_with_distinct_distances(self):
        rng = np.random.default_rng(7)
        X, y = rng.random((60, 2)), rng.random(60)
        perm = rng.permutation(60)
        Q = rng.random((20, 2))
        a = fit_mean(X, y, [0, 1], 5).predict_batch(Q)
        b = fit_mean(X[perm], y[perm], [0, 1], 5).predict_batch(Q)
        assert_allclose(a, b, rtol=1e-14)

    @pytest.mark.parametrize("k", [0, 4])
    def test_k_out_of_range(self, k):
        with pytest.raises(PreconditionError):
            fit_mean(np.zeros((3, 1)), np.zeros(3), [0], k)

    def test_bad_support(self):
        with pytest.raises(PreconditionError):
            fit_mean(np.zeros((3, 2)), np.zeros(3), [2], 1)


class TestResiduals:
    def test_subtraction(self):
        m = fit_mean(np.zeros((2, 1)), np.array([1.0, 1.0]), [0], 2)
        assert_array_equal(compute_residuals(m, np.zeros((2, 1)), [3.0, 5.0]), [2.0, 4.0])

    def test_zero_mean_leaves_y(self):
        m = fit_mean(np.zeros((2, 1)), np.zeros(2), [0], 1)
        y = np.array([0.3, -2.0])
        assert_array_equal(compute_residuals(m, np.ones((2, 1)), y), y)

    def test_overlapping_rows_rejected(self):
        m = fit_mean(np.zeros((2, 1)), np.zeros(2), [0], 1, rows=[4, 7])
        with pytest.raises(PreconditionError, match="shares 1 rows"):
            compute_residuals(m, np.zeros((2, 1)), np.zeros(2), rows=[7, 8])


class TestVariance:
    def test_local_average_of_squares(self):
        X = np.array([[0.0], [1.0], [2.0]])
        v = fit_variance(np.array([1.0, -2.0, 3.0]), X, [0], 2)
        assert predict_variance(v, [0.1]) == 2.5
        assert predict_sd(v, [0.1]) == pytest.approx(1.58113883, abs=1e-8)

    def test_homoscedastic(self):
        v = fit_variance(np.array([1.0, 2.0, 3.0]), np.zeros((3, 1)), [0], 1, homoscedastic=True)
        assert v.is_constant
        assert_allclose(v.predict_batch(np.random.default_rng(0).random((4, 1))), 14 / 3)

    def test_empty_support_falls_back(self):
        v = fit_variance(np.array([1.0, 3.0]), np.zeros((2, 2)), (), 1)
        assert v.homoscedastic and v.constant_variance == 5.0

    def test_zero_residuals(self):
        v = fit_variance(np.zeros(5), np.arange(5.0).reshape(-1, 1), [0], 2)
        assert_array_equal(v.predict_batch(np.array([[0.3], [9.0]])), 0.0)

    def test_range_invariant(self):
        rng = np.random.default_rng(8)
        e = rng.standard_normal(80)
        v = fit_variance(e, rng.random((80, 2)), [0, 1], 9)
        p = v.predict_batch(rng.random((100, 2)))
        assert p.min() >= (e ** 2).min() and p.max() <= (e ** 2).max()


class TestScaleLocModel:
    def make(self, **kw):
        rng = np.random.default_rng(9)
        X = rng.random((30, 2))
        mean = fit_mean(X, rng.random(30), [0], 3)
        var = fit_variance(rng.standard_normal(30), X, [1], 4)
        return ScaleLocModel(mean, var, 2, **kw)

    def test_calibration_iff_empirical(self):
        with pytest.raises(PreconditionError):
            self.make(error_mode="empirical")
        with pytest.raises(PreconditionError):
            self.make(calibration=np.zeros(3))
        with pytest.raises(PreconditionError):
            self.make(error_mode="uniform")
        self.make(error_mode="empirical", calibration=np.zeros(3))

    def test_dimension_check(self):
        with pytest.raises(PreconditionError, match="expects 2 features"):
            self.make().predict(np.zeros((1, 3)))

    def test_json_round_trip_is_bitwise(self):
        m = self.make(standardizer=Standardizer(np.array([0.5, 0.1]), np.array([2.0, 3.0])),
                      error_mode="empirical", calibration=np.array([0.1, -1.2]))
        back = ScaleLocModel.from_dict(json.loads(json.dumps(m.to_dict())))
        Q = np.random.default_rng(1).random((50, 2))
        for a, b in zip(m.predict(Q), back.predict(Q)):
            assert_array_equal(a, b)
        assert_array_equal(back.calibration, m.calibration)

    def test_rejects_foreign_document(self):
        with pytest.raises(PreconditionError):
            ScaleLocModel.from_dict({"kind": "other"})
