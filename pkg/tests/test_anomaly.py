import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from conftest import small_campaign
from lora_ranging.anomaly import (
    IsolationForest, build_forest, c_factor, drop_count, filter_all_devices, filter_device_records,
    harmonic, score_from_path_length,
)
from lora_ranging.exceptions import DataError
from oracles import average_unsuccessful_search, harmonic_sum


def one_device(n=1000, seed=0, device="EN2"):
    records, _ = small_campaign(n=n, seed=seed)
    return records.loc[records.device_id == device].reset_index(drop=True)


def cluster_device(n=1000, seed=0, device="EN2", steady_environment=True):
    """Stationary link: Gaussian radio fields, environment either steady or i.i.d. Gaussian."""
    rng = np.random.default_rng(seed)
    means = {"rssi_dbm": -95.0, "snr_db": 8.0, "temperature_c": 21.0, "humidity_pct": 45.0,
             "co2_ppm": 600.0, "pm25_ugm3": 8.0, "pressure_hpa": 1010.0}
    sds = {"rssi_dbm": 4.0, "snr_db": 2.0, "temperature_c": 0.5, "humidity_pct": 2.0,
           "co2_ppm": 40.0, "pm25_ugm3": 1.0, "pressure_hpa": 0.5}
    records = pd.DataFrame({
        "timestamp": pd.date_range("2024-01-01", periods=n, freq="min", tz="UTC").astype("datetime64[us, UTC]"),
        "device_id": device,
        "counter": np.arange(n, dtype=np.int64),
        "frequency_mhz": 868.1,
        "spreading_factor": 7,
        **{k: means[k] + sds[k] * rng.standard_normal(n) for k in means},
    })
    if steady_environment:
        for k in ("temperature_c", "humidity_pct", "co2_ppm", "pm25_ugm3", "pressure_hpa"):
            records[k] = means[k]
    return records


def with_burst(records, size=10, offset_db=60.0, start=500):
    out = records.copy()
    idx = np.arange(start, start + size)
    out.loc[idx, "rssi_dbm"] += offset_db
    return out, idx


class TestNormalisation:
    def test_c_two(self):
        assert c_factor(2) == 1.0

    @pytest.mark.parametrize("n", [3, 10, 256, 1000, 1023, 1024, 5000])
    def test_c_matches_exact_harmonics(self, n):
        assert c_factor(n) == pytest.approx(average_unsuccessful_search(n), rel=1e-12)

    @pytest.mark.parametrize("m", [1, 7, 100, 2000])
    def test_harmonic(self, m):
        assert harmonic(m) == pytest.approx(harmonic_sum(m), rel=1e-12)

    def test_score_half_at_mean_length(self):
        assert score_from_path_length(c_factor(256), 256) == pytest.approx(0.5, abs=1e-15)

    def test_score_limit(self):
        assert score_from_path_length(1e-12, 256) == pytest.approx(1.0)

    @pytest.mark.parametrize("n, c, k", [(1000, 0.01, 10), (999, 0.01, 10), (100, 0.07, 7),
                                         (7, 0.0, 0), (300, 0.01, 3)])
    def test_drop_count(self, n, c, k):
        assert drop_count(n, c) == k


class TestForest:
    def test_two_points_depth_one(self):
        f = build_forest(np.array([[0.0, 1.0], [5.0, -2.0]]), n_trees=20)
        assert all(t.size[0] == 2 for t in f.trees_)
        np.testing.assert_allclose(f.mean_path_length(np.array([[0.0, 1.0], [5.0, -2.0]])), 1.0)

    def test_too_few_samples(self):
        with pytest.raises(DataError):
            build_forest(np.zeros((1, 3)))

    def test_deterministic(self):
        X = np.random.default_rng(1).normal(size=(300, 4))
        a = build_forest(X, seed=9).anomaly_score(X)
        b = build_forest(X, seed=9).anomaly_score(X)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, build_forest(X, seed=10).anomaly_score(X))

    def test_extreme_outlier_scores_highest(self):
        X = np.random.default_rng(2).normal(size=(500, 3))
        X = np.vstack([X, [100.0, 100.0, 100.0]])
        s = build_forest(X, subsample=512).anomaly_score(X)
        assert s[-1] > s[:-1].max()

    def test_depth_limit_and_score_range(self):
        X = np.random.default_rng(3).normal(size=(2000, 5))
        f = build_forest(X, n_trees=30, subsample=256)
        assert max(int(t.depth.max()) for t in f.trees_) <= math.ceil(math.log2(256))
        s = f.anomaly_score(X)
        assert np.all((s > 0) & (s < 1))

    @given(st.integers(2, 80), st.integers(0, 2**32))
    @settings(max_examples=30, deadline=None)
    def test_scores_bounded(self, n, seed):
        X = np.random.default_rng(seed).normal(size=(n, 2))
        s = build_forest(X, n_trees=10, seed=seed).anomaly_score(X)
        assert np.all((s > 0) & (s < 1))

    def test_constant_features_skipped(self):
        X = np.column_stack([np.zeros(200), np.random.default_rng(4).normal(size=200)])
        f = build_forest(X, n_trees=10)
        for t in f.trees_:
            assert np.all(t.feature[t.feature >= 0] == 1)

    def test_sklearn_conventions(self):
        X = np.random.default_rng(5).normal(size=(400, 2))
        est = IsolationForest(n_estimators=50, contamination=0.05).fit(X)
        assert est.get_params()["contamination"] == 0.05
        np.testing.assert_array_equal(est.score_samples(X), -est.anomaly_score(X))
        assert (est.predict(X) == -1).sum() == 20


class TestDeviceFilter:
    def test_exact_count(self):
        kept, dropped = filter_device_records(one_device(), 0.01)
        assert (len(kept), len(dropped)) == (990, 10)

    def test_zero_contamination_identity(self):
        records = one_device(n=300)
        kept, dropped = filter_device_records(records, 0.0)
        pd.testing.assert_frame_equal(kept, records)
        assert len(dropped) == 0

    def test_burst_fully_flagged(self):
        records, idx = with_burst(cluster_device())
        kept, dropped = filter_device_records(records, 0.01)
        assert len(dropped) == 10
        assert set(dropped["counter"]) == set(records.loc[idx, "counter"])
        assert kept["rssi_dbm"].max() < records.loc[idx, "rssi_dbm"].min()

    @pytest.mark.parametrize("seed", range(5))
    def test_burst_flagged_for_several_seeds(self, seed):
        records, idx = with_burst(cluster_device(seed=seed), start=100 + 37 * seed)
        _, dropped = filter_device_records(records, 0.01, seed=seed)
        assert set(dropped["counter"]) == set(records.loc[idx, "counter"])

    def test_burst_diluted_by_independent_environment_noise(self):
        # A deviation in one of seven i.i.d. features is chosen by 1/7 of the
        # splits, so 7-d Gaussian tails compete with it. Still far above chance.
        hits = []
        for seed in range(5):
            records, idx = with_burst(cluster_device(seed=seed, steady_environment=False), start=100 + 37 * seed)
            _, dropped = filter_device_records(records, 0.01, seed=seed)
            hits.append(len(set(dropped["counter"]) & set(records.loc[idx, "counter"])))
        assert min(hits) >= 3

    def test_order_invariant(self):
        records, _ = with_burst(one_device(n=800), offset_db=20.0)
        shuffled = records.sample(frac=1.0, random_state=7).reset_index(drop=True)
        _, d1 = filter_device_records(records, 0.02)
        _, d2 = filter_device_records(shuffled, 0.02)
        assert sorted(d1["counter"]) == sorted(d2["counter"])

    def test_mixed_devices_fatal(self):
        records, _ = small_campaign(n=50)
        with pytest.raises(DataError):
            filter_device_records(records, 0.01)

    def test_all_devices(self):
        records, _ = small_campaign(n=500)
        kept, dropped = filter_all_devices(records, 0.01)
        assert len(dropped) == 6 * 5
        assert len(kept) + len(dropped) == len(records)
