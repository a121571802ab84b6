import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lora_ranging.exceptions import DataError, NumericError
from lora_ranging.features import MWM, MWM_EP, MWM_EP_KF, build_design_matrix
from lora_ranging.fit import (
    IllConditionedWarning, ModelCoefficients, PathLossRegressor, dumps_model, fit_model, load_model,
    loads_model, ols_fit, regression_metrics, save_model,
)
from lora_ranging.kalman import filter_frame
from lora_ranging.stats import UNDEFINED
from lora_ranging.synth import default_coefficients
from oracles import normal_equations


def random_system(seed, n=200, p=4):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))])
    y = X @ rng.normal(size=p) * 3 + rng.normal(size=n)
    return X, y


class TestOLS:
    def test_exact_line(self):
        x = np.arange(4.0)
        X = np.column_stack([np.ones(4), x])
        b, r = ols_fit(X, 2 + 3 * x)
        np.testing.assert_allclose(b, [2, 3], atol=1e-12)
        np.testing.assert_allclose(r, 0, atol=1e-12)

    def test_intercept_only(self):
        b, _ = ols_fit(np.ones((6, 1)), np.full(6, 5.0))
        assert b[0] == pytest.approx(5.0, abs=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_gram_oracle(self, seed):
        X, y = random_system(seed)
        b, r = ols_fit(X, y)
        np.testing.assert_allclose(b, normal_equations(X, y), rtol=1e-8)
        assert np.max(np.abs(X.T @ r)) < 1e-6 * np.linalg.norm(y)

    @given(st.integers(0, 2**31), st.integers(2, 8))
    @settings(max_examples=40, deadline=None)
    def test_residual_orthogonality(self, seed, p):
        X, y = random_system(seed, n=60, p=p)
        _, r = ols_fit(X, y)
        assert np.max(np.abs(X.T @ r)) < 1e-6 * np.linalg.norm(y)

    def test_rank_deficient_names_column(self):
        X, y = random_system(0)
        X = np.column_stack([X, 2 * X[:, 2] - X[:, 1]])
        with pytest.raises(NumericError, match="'dup'|'b'|'a'"):
            ols_fit(X, y, ["c", "a", "b", "z", "dup"])

    def test_zero_column(self):
        X, y = random_system(1)
        X[:, 3] = 0
        with pytest.raises(NumericError, match="'w'"):
            ols_fit(X, y, ["i", "u", "v", "w"])

    def test_ill_conditioned_warns(self):
        X, y = random_system(2)
        X = np.column_stack([X, X[:, 1] + 1e-9 * np.random.default_rng(0).normal(size=len(X))])
        with pytest.warns(IllConditionedWarning):
            ols_fit(X, y)

    def test_scale_does_not_trigger_rank_check(self):
        X, y = random_system(3)
        X[:, 1] *= 1e7
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            b, _ = ols_fit(X, y)
        np.testing.assert_allclose(b, normal_equations(X, y), rtol=1e-6)

    def test_too_few_rows(self):
        with pytest.raises(DataError):
            ols_fit(np.ones((2, 3)), np.ones(2))

    def test_regressor_api(self):
        X, y = random_system(4)
        reg = PathLossRegressor().fit(X, y)
        np.testing.assert_allclose(reg.predict(X), y - reg.residuals_, atol=1e-9)
        assert 0 < reg.score(X, y) <= 1


class TestMetrics:
    def test_perfect(self):
        m = regression_metrics([1.0, 2.0, 4.0], [1.0, 2.0, 4.0])
        assert m.rmse == 0 and m.r2 == 1

    def test_rmse_errors(self):
        assert regression_metrics(residuals=[3.0, 4.0]).rmse == pytest.approx(math.sqrt(12.5), abs=1e-6)
        assert regression_metrics(residuals=[3.0, 4.0]).rmse == pytest.approx(3.535534, abs=1e-6)

    def test_symmetric_skew(self):
        assert regression_metrics(residuals=[-1.0, 0.0, 1.0]).skewness == 0

    def test_constant_truth_r2_undefined(self):
        m = regression_metrics([5.0, 5.0, 5.0], [4.0, 5.0, 6.0])
        assert m.r2 is UNDEFINED
        assert not (isinstance(m.r2, float) and math.isnan(m.r2))


class TestCampaignFit:
    def test_noise_free_recovery(self, noiseless_campaign):
        records, cfg = noiseless_campaign
        c = fit_model(records, cfg.geometry, MWM_EP, cv_folds=0)
        np.testing.assert_allclose(c.vector(), default_coefficients().vector(), atol=1e-6)
        assert c.diagnostics["train_rmse_db"] < 1e-6

    def test_environment_terms_reduce_error(self, default_run):
        m = default_run["models"]
        assert m["MWM-EP"].diagnostics["train_rmse_db"] <= m["MWM"].diagnostics["train_rmse_db"]
        assert m["MWM-EP"].diagnostics["test_rmse_db"] < m["MWM"].diagnostics["test_rmse_db"]

    def test_cv_diagnostics(self, default_run):
        d = default_run["models"]["MWM-EP"].diagnostics
        assert d["cv_folds"] == 5
        assert d["cv_rmse_db_mean"] == pytest.approx(d["train_rmse_db"], rel=0.2)

    def test_non_physical_exponent_rejected(self):
        c = ModelCoefficients(MWM, 30.0, -0.5, (7.0, 1.5))
        with pytest.raises(NumericError):
            c.check_physical()
        with pytest.raises(NumericError):
            loads_model(dumps_model(c))


class TestSerialisation:
    def test_round_trip_bit_exact(self, default_run, tmp_path):
        for name, c in default_run["models"].items():
            path = tmp_path / f"{name}.txt"
            save_model(c, path)
            back = load_model(path)
            assert back.variant == c.variant
            assert back.vector().tobytes() == c.vector().tobytes()
            assert back.sigma_psi == c.sigma_psi
            assert back.diagnostics.keys() == c.diagnostics.keys()

    def test_reload_gives_identical_predictions(self, default_run):
        test = default_run["prepared"].test
        geo = default_run["synth"].geometry
        c = default_run["models"]["MWM-EP-KF"]
        X, _ = build_design_matrix(test, geo, MWM_EP_KF)
        np.testing.assert_array_equal(loads_model(dumps_model(c)).predict_target(X), c.predict_target(X))

    def test_column_order_checked(self):
        text = dumps_model(ModelCoefficients(MWM, 30.0, 2.8, (7.0, 1.5)))
        bad = text.replace("intercept,log_dist,n_brick,n_wood", "log_dist,intercept,n_brick,n_wood")
        assert bad != text
        with pytest.raises(DataError):
            loads_model(bad)

    def test_filtered_variant_fit_needs_filter(self, geometry):
        from conftest import small_campaign
        r, _ = small_campaign(n=100)
        with pytest.raises(DataError):
            fit_model(r, geometry, MWM_EP_KF, cv_folds=0)
        c = fit_model(filter_frame(r), geometry, MWM_EP_KF, cv_folds=0)
        assert c.variant is MWM_EP_KF
