import math

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from knnscale.data import Dataset, make_splits
from knnscale.errors import PreconditionError
from knnscale.simbench import ScenarioSpec, generate
from knnscale.varselect import (STAGE_ROLES, loco_statistics, select_on_halves, select_variables,
                                t_test_one_sided)


def t2_tail(t):
    """Upper tail of Student t with 2 degrees of freedom, closed form."""
    return 0.5 - t / (2 * math.sqrt(2 + t * t))


def plan_for(n, seed):
    return make_splits(n, [(r, 1.0) for r in STAGE_ROLES], seed)


class TestTTest:
    def test_one_two_three(self):
        t, p, df = t_test_one_sided([1, 2, 3])
        assert df == 2
        assert t == pytest.approx(3.4641016, abs=1e-7)
        assert p == pytest.approx(t2_tail(t), abs=1e-12)
        assert p == pytest.approx(0.03709, abs=1e-5)

    def test_symmetric_values(self):
        t, p, _ = t_test_one_sided([-1.0, 1.0])
        assert t == 0.0 and p == 0.5

    @pytest.mark.parametrize("v, p", [(2.0, 0.0), (0.0, 1.0), (-1.0, 1.0)])
    def test_identical_values(self, v, p):
        assert t_test_one_sided([v] * 4)[1] == p

    def test_too_short(self):
        with pytest.raises(PreconditionError):
            t_test_one_sided([1.0])

    @pytest.mark.parametrize("values", [[0.3, -1.2, 4.0, 2.2], [5, 1, 1, 0, 2, 9]])
    def test_against_df_formula_and_sample_sd(self, values):
        v = np.asarray(values, dtype=float)
        t, p, df = t_test_one_sided(v)
        assert t == pytest.approx(v.mean() / (v.std(ddof=1) / math.sqrt(v.size)), rel=1e-14)
        assert df == v.size - 1


class TestLoco:
    def test_constant_feature_gives_exact_zero(self):
        rng = np.random.default_rng(0)
        X = rng.random((400, 3))
        X[:, 2] = 0.25
        y = 5 * X[:, 0] + rng.standard_normal(400)
        W, full, reduced = loco_statistics(X[:200], y[:200], X[200:], y[200:], [0, 1, 2], 2)
        assert_array_equal(W, 0.0)
        assert full.k == reduced.k

    def test_feature_must_be_candidate(self):
        X = np.zeros((10, 2))
        with pytest.raises(PreconditionError):
            loco_statistics(X, np.zeros(10), X, np.zeros(10), [0], 1)

    def test_last_feature_uses_constant_fallback(self):
        rng = np.random.default_rng(1)
        X = rng.random((200, 1))
        y = 3 * X[:, 0] + 0.1 * rng.standard_normal(200)
        W, _, reduced = loco_statistics(X[:100], y[:100], X[100:], y[100:], [0], 0)
        assert reduced.is_constant
        assert W.mean() > 0

    def test_duplicate_column_rarely_significant(self):
        hits = 0
        for seed in range(50):
            rng = np.random.default_rng(seed)
            x = rng.random(600)
            X = np.column_stack([x, x, rng.random(600)])
            y = 5 * x + rng.standard_normal(600)
            rep = select_on_halves(X, y, [0, 1, 2], "mean", 0.05, 6)
            hits += rep.tests[1].selected
        assert hits <= 5

    def test_halves_too_small(self):
        with pytest.raises(PreconditionError):
            select_on_halves(np.zeros((3, 1)), np.zeros(3), [0], "mean", 0.05, 2)


class TestSelectVariables:
    def test_report_invariants(self):
        d = generate(ScenarioSpec(3, 4), 3000, 11)
        mean, var = select_variables(d, plan_for(d.n, 2))
        for rep in (mean, var):
            assert rep.n_tests == 8
            for t in rep.tests:
                assert t.selected == (t.p_value < 0.05 / 8)
        assert mean.target == "mean" and var.target == "variance"
        assert "threshold" in mean.to_dict() and "decision" in mean.render()

    def test_scenario_two_mean_side_is_flat(self):
        d = generate(ScenarioSpec(2, 3), 6000, 3)
        mean, var = select_variables(d, plan_for(d.n, 3))
        assert mean.selected == ()
        assert 0 in var.selected

    def test_scenario_six_supports(self):
        d = generate(ScenarioSpec(6, 5), 20_000, 5)
        mean, var = select_variables(d, plan_for(d.n, 5))
        assert mean.selected == (0, 1, 2)
        assert var.selected == (3, 4)

    def test_alpha_monotone(self):
        d = generate(ScenarioSpec(6, 6), 6000, 8)
        plan = plan_for(d.n, 8)
        runs = [select_variables(d, plan, alpha=a) for a in (0.5, 0.1, 0.01, 1e-4, 1e-8)]
        for (m0, v0), (m1, v1) in zip(runs, runs[1:]):
            assert set(m1.selected) <= set(m0.selected)
            # variance p-values are conditional on the mean support chosen upstream
            if m1.selected == m0.selected:
                assert set(v1.selected) <= set(v0.selected)
                assert [t.p_value for t in v1.tests] == [t.p_value for t in v0.tests]

    def test_common_affine_map_leaves_decisions_unchanged(self):
        rng = np.random.default_rng(4)
        X = rng.integers(0, 1024, (2400, 3)) / 1024.0
        y = 5 * X[:, 0] + (1 + 3 * X[:, 1]) * rng.standard_normal(2400)
        plan = plan_for(2400, 4)
        a = select_variables(Dataset(X, y), plan)
        b = select_variables(Dataset(4.0 * X + 3.0, y), plan)
        for ra, rb in zip(a, b):
            assert ra.to_dict() == rb.to_dict()

    def test_bitwise_reproducible(self):
        d = generate(ScenarioSpec(1, 4), 2400, 1)
        plan = plan_for(d.n, 1)
        assert [r.to_dict() for r in select_variables(d, plan)] == \
            [r.to_dict() for r in select_variables(d, plan)]

    def test_candidate_subset_sets_test_count(self):
        d = generate(ScenarioSpec(1, 4), 1200, 1)
        mean, _ = select_variables(d, plan_for(d.n, 1), candidates=[1, 2])
        assert mean.n_tests == 4 and [t.feature for t in mean.tests] == [1, 2]

    @pytest.mark.parametrize("kw", [dict(alpha=0.0), dict(alpha=1.0), dict(candidates=[]), dict(candidates=[7])])
    def test_bad_arguments(self, kw):
        d = generate(ScenarioSpec(1, 3), 600, 1)
        with pytest.raises(PreconditionError):
            select_variables(d, plan_for(d.n, 1), **kw)

    @pytest.mark.slow
    def test_single_relevant_feature_power(self):
        found = 0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            X = rng.random((20_000, 1))
            y = 5 * X[:, 0] + rng.standard_normal(20_000)
            mean, _ = select_variables(Dataset(X, y), plan_for(20_000, seed))
            found += mean.selected == (0,)
        assert found >= 19

    @pytest.mark.slow
    def test_noise_features_family_error_rate(self):
        # 100 seeds; one-sided binomial slack of two standard errors above alpha
        n, seeds, alpha = 12_000, 100, 0.05
        fp_mean = fp_var = 0
        for seed in range(seeds):
            rng = np.random.default_rng(1000 + seed)
            X = rng.random((n, 5))
            y = 5 * X[:, 1] + 5 * X[:, 2] + rng.standard_normal(n)
            mean, var = select_variables(Dataset(X, y), plan_for(n, seed), alpha=alpha)
            fp_mean += any(j not in (1, 2) for j in mean.selected)
            fp_var += any(j not in (1, 2) for j in var.selected)
        bound = alpha + 2 * math.sqrt(alpha * (1 - alpha) / seeds)
        assert fp_mean / seeds <= bound
        assert fp_var / seeds <= bound
