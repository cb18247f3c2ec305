import mpmath
import numpy as np
import pytest
from numpy.testing import assert_array_equal

from knnscale.data import Dataset
from knnscale.errors import DegenerateScaleWarning, PreconditionError
from knnscale.estimators import ScaleLocModel, fit_mean, fit_variance
from knnscale.pipeline import PipelineConfig, fit_pipeline
from knnscale.roc import (RocModel, auc, auc_gaussian, auc_quadrature, auc_surface, conditional_cdf,
                          tpr_fpr, write_surface_csv)

mpmath.mp.dps = 40


def Phi(z):
    return float(mpmath.ncdf(z))


def constant_model(m, s, p=1, **kw):
    X = np.zeros((2, p))
    mean = fit_mean(X, np.array([m, m]), (), 1)
    var = fit_variance(np.array([s, -s]), X, (), 1, homoscedastic=True)
    return ScaleLocModel(mean, var, p, **kw)


def linear_model(slope, p=1):
    """Mean close to slope * x1 on [0, 1], unit scale."""
    X = np.linspace(0, 1, 201).reshape(-1, 1)
    X = np.hstack([X, np.zeros((201, p - 1))])
    mean = fit_mean(X, slope * X[:, 0], [0], 1)
    var = fit_variance(np.ones(201), X, (), 1, homoscedastic=True)
    return ScaleLocModel(mean, var, p)


class TestConditionalCdf:
    def test_median(self):
        assert conditional_cdf(constant_model(2.0, 3.0), 2.0, [0.0]) == 0.5

    def test_upper_quantile(self):
        assert abs(conditional_cdf(constant_model(2.0, 3.0), 2.0 + 1.95996398 * 3.0, [0.0])
                   - Phi(1.95996398)) < 1e-10
        assert conditional_cdf(constant_model(2.0, 3.0), 2.0 + 1.95996398 * 3.0, [0.0]) == \
            pytest.approx(0.975, abs=1e-8)

    def test_limits_and_monotone(self):
        t = np.linspace(-50, 50, 2001)
        F = conditional_cdf(constant_model(1.0, 2.0), t, [0.0])
        assert F[0] < 1e-12 and F[-1] == 1.0
        assert np.all(np.diff(F) >= 0)

    def test_zero_scale_is_a_flagged_step(self):
        with pytest.warns(DegenerateScaleWarning):
            F = conditional_cdf(constant_model(1.0, 0.0), np.array([0.9, 1.0, 1.1]), [0.0])
        assert_array_equal(F, [0.0, 1.0, 1.0])


class TestRates:
    def test_shifted_unit_normals(self):
        roc = RocModel(constant_model(1.0, 1.0), constant_model(0.0, 1.0))
        tpr, fpr = tpr_fpr(roc, 0.5, [0.0])
        assert tpr == pytest.approx(Phi(0.5), abs=1e-12)
        assert fpr == pytest.approx(1 - Phi(0.5), abs=1e-12)
        assert round(tpr, 5) == 0.69146 and round(fpr, 5) == 0.30854

    def test_identical_populations(self):
        roc = RocModel(constant_model(0.3, 2.0), constant_model(0.3, 2.0))
        c = np.linspace(-10, 10, 41)
        tpr, fpr = tpr_fpr(roc, c, [0.0])
        assert_array_equal(tpr, fpr)

    def test_extreme_thresholds(self):
        roc = RocModel(constant_model(1.0, 1.0), constant_model(0.0, 2.0))
        assert tpr_fpr(roc, -1e6, [0.0]) == (1.0, 1.0)
        assert tpr_fpr(roc, 1e6, [0.0]) == (0.0, 0.0)

    def test_curve_is_nonincreasing(self):
        roc = RocModel(constant_model(1.0, 0.7), constant_model(-0.2, 1.3))
        tpr, fpr = tpr_fpr(roc, np.linspace(-20, 20, 4001), [0.0])
        assert np.all(np.diff(tpr) <= 0) and np.all(np.diff(fpr) <= 0)
        assert (tpr[0], fpr[0]) == pytest.approx((1, 1)) and (tpr[-1], fpr[-1]) == pytest.approx((0, 0))

    def test_requires_gaussian_models(self):
        emp = constant_model(0.0, 1.0, error_mode="empirical", calibration=np.zeros(3))
        with pytest.raises(PreconditionError, match="gaussian"):
            RocModel(emp, constant_model(0.0, 1.0))

    def test_requires_same_dimension(self):
        with pytest.raises(PreconditionError, match="dimension"):
            RocModel(constant_model(0.0, 1.0, p=2), constant_model(0.0, 1.0, p=3))


class TestAuc:
    def test_identical_is_one_half(self):
        roc = RocModel(constant_model(4.0, 1.2), constant_model(4.0, 1.2))
        assert auc(roc, [0.0]) == 0.5
        assert auc_gaussian(0.0, 0.0, 0.0, 0.0) == 0.5

    def test_reference_value(self):
        roc = RocModel(constant_model(1.3859, 1.0), constant_model(0.0, 1.0))
        a = auc(roc, [0.0])
        assert a == pytest.approx(Phi(1.3859 / mpmath.sqrt(2)), abs=1e-12)
        assert a == pytest.approx(0.8365, abs=5e-5)

    @pytest.mark.parametrize("delta", [-2.0, -0.5, 0.0, 0.7, 2.0])
    @pytest.mark.parametrize("sD, sH", [(1.0, 1.0), (0.5, 2.0), (3.0, 0.4)])
    def test_quadrature_matches_closed_form(self, delta, sD, sH):
        closed = float(auc_gaussian(delta, sD, 0.0, sH))
        ref = Phi(delta / mpmath.sqrt(sD ** 2 + sH ** 2))
        assert abs(closed - ref) < 1e-12
        assert abs(auc_quadrature(delta, sD, 0.0, sH, 10_000) - closed) < 1e-6

    @pytest.mark.parametrize("delta, sD, sH", [(0.7, 1.0, 1.0), (-1.1, 0.5, 2.0), (2.0, 3.0, 0.4)])
    def test_printed_variant_is_the_complement(self, delta, sD, sH):
        d = auc_quadrature(delta, sD, 0.0, sH, 10_000)
        p = auc_quadrature(delta, sD, 0.0, sH, 10_000, variant="printed")
        assert abs(d + p - 1.0) < 1e-6

    def test_quadrature_path_through_auc(self):
        roc = RocModel(constant_model(1.0, 1.0), constant_model(0.0, 2.0))
        assert abs(auc(roc, [0.0], n_quad=10_000) - auc(roc, [0.0])) < 1e-6

    def test_bad_quadrature_arguments(self):
        with pytest.raises(PreconditionError):
            auc_quadrature(0, 1, 0, 1, 1)
        with pytest.raises(PreconditionError):
            auc_quadrature(0, 1, 0, 1, 10, variant="other")

    def test_degenerate_scales(self):
        assert auc_gaussian(1.0, 0.0, 0.0, 0.0) == 1.0
        assert auc_gaussian(-1.0, 0.0, 0.0, 0.0) == 0.0


class TestSurface:
    def test_single_point(self):
        roc = RocModel(constant_model(1.0, 1.0), constant_model(0.0, 1.0))
        surf = auc_surface(roc, [0.25])
        assert len(surf) == 1 and surf[0][0] == (0.25,)

    def test_identical_models_everywhere_half(self):
        m = linear_model(3.0)
        surf = auc_surface(RocModel(m, m), np.linspace(0, 1, 11).reshape(-1, 1))
        assert [a for _, a in surf] == [0.5] * 11

    def test_separation_increasing_along_first_covariate(self):
        roc = RocModel(linear_model(4.0, p=2), constant_model(0.0, 1.0, p=2))
        G = np.column_stack([np.linspace(0, 1, 21), np.full(21, 0.5)])
        vals = [a for _, a in auc_surface(roc, G)]
        assert np.all(np.diff(vals) >= 0) and vals[-1] > vals[0]

    def test_csv(self, tmp_path):
        roc = RocModel(constant_model(1.0, 1.0, p=2), constant_model(0.0, 1.0, p=2))
        path = tmp_path / "s.csv"
        write_surface_csv(auc_surface(roc, [[0.0, 1.0], [0.5, 0.5]]), path, ["a", "b"])
        lines = path.read_text().splitlines()
        assert lines[0] == "a,b,auc" and len(lines) == 3


def fit_group(X, y, seed):
    cfg = PipelineConfig(seed=seed, standardize=False)
    return fit_pipeline(Dataset(X, y), cfg).model


@pytest.mark.slow
def test_fitted_separation_is_monotone_along_signal():
    rng = np.random.default_rng(0)
    n = 12_000
    XD, XH = rng.random((n, 2)), rng.random((n, 2))
    yD = 3 * XD[:, 0] + rng.standard_normal(n)
    yH = rng.standard_normal(n)
    roc = RocModel(fit_group(XD, yD, 1), fit_group(XH, yH, 2))
    G = np.column_stack([np.linspace(0.05, 0.95, 10), np.full(10, 0.5)])
    vals = np.array([a for _, a in auc_surface(roc, G)])
    truth = np.array([Phi(3 * g / mpmath.sqrt(2)) for g in G[:, 0]])
    assert np.all(np.diff(vals) >= -0.03)
    assert np.max(np.abs(vals - truth)) < 0.08


@pytest.mark.slow
def test_common_location_shift_leaves_auc_unchanged():
    rng = np.random.default_rng(3)
    n = 6000
    XD, XH = rng.random((n, 2)), rng.random((n, 2))
    yD = 2 * XD[:, 0] + (0.5 + XD[:, 1]) * rng.standard_normal(n)
    yH = XH[:, 1] + rng.standard_normal(n)
    G = rng.random((25, 2))
    base = auc_surface(RocModel(fit_group(XD, yD, 5), fit_group(XH, yH, 6)), G)
    shifted = auc_surface(RocModel(fit_group(XD, yD + 7.5, 5), fit_group(XH, yH + 7.5, 6)), G)
    diff = max(abs(a - b) for (_, a), (_, b) in zip(base, shifted))
    assert diff < 0.01
