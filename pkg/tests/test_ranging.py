
import numpy as np
import pandas as pd
import pytest
from hypothesis import given, strategies as st

from conftest import small_campaign
from lora_ranging.dataset import LinkGeometry, UplinkRecord, iter_rows
from lora_ranging.exceptions import DataError, NumericError
from lora_ranging.features import MWM, MWM_EP, MWM_EP_KF, frequency_term, log_distance
from lora_ranging.fit import ModelCoefficients
from lora_ranging.kalman import FilterParams
from lora_ranging.pipeline import time_stream
from lora_ranging.ranging import (
    DistanceEstimator, StreamingRanger, estimate_packet, estimate_records, estimate_stream,
    excess_path_loss, invert_distance,
)
from lora_ranging.synth import default_coefficients

TS = pd.Timestamp("2024-01-01T00:00:00Z")


def record(f=1.0, snr=0.0, env=(0.0, 0.0, 0.0, 0.0, 0.0), rssi=-50.0, dev="X"):
    return UplinkRecord(TS, dev, 0, f, 7, rssi, snr, *env)


class TestExcessLoss:
    def test_cancellation(self):
        c = ModelCoefficients(MWM_EP, 37.5, 2.0, (7.0, 1.5))
        assert excess_path_loss(record(), LinkGeometry("X", 5.0, 0, 0), c, 37.5) == 0.0

    def test_hand_value(self):
        c = ModelCoefficients(MWM, 20.0, 3.0, (0.0, 0.0))
        assert excess_path_loss(record(), LinkGeometry("X", 5.0, 0, 0), c, 50.0) == pytest.approx(30.0)

    def test_walls_subtracted(self):
        c = ModelCoefficients(MWM, 20.0, 3.0, (7.02, 1.5))
        base = excess_path_loss(record(), LinkGeometry("X", 5.0, 0, 0), c, 50.0)
        one = excess_path_loss(record(), LinkGeometry("X", 5.0, 1, 0), c, 50.0)
        assert base - one == pytest.approx(7.02, abs=1e-12)

    def test_environment_and_snr(self):
        eps = (-0.1, -0.08, 0.0015, 0.04, -0.005)
        c = ModelCoefficients(MWM_EP, 20.0, 3.0, (0.0, 0.0), eps, -0.4)
        env = (21.0, 45.0, 600.0, 8.0, 1010.0)
        eta = excess_path_loss(record(f=868.1, snr=6.0, env=env), LinkGeometry("X", 5.0, 0, 0), c, 120.0)
        expected = 120.0 - 20.0 - frequency_term(868.1) - np.dot(eps, env) + 0.4 * 6.0
        assert eta == pytest.approx(expected, abs=1e-12)


class TestInversion:
    def test_reference(self):
        assert invert_distance(0.0, 2.7) == 1.0

    def test_hand_value(self):
        assert invert_distance(30.0, 3.0) == pytest.approx(10.0, rel=1e-15)

    def test_round_trip(self):
        c = default_coefficients()
        g = LinkGeometry("X", 17.3, 1, 2)
        env = (21.0, 45.0, 600.0, 8.0, 1010.0)
        rec = record(f=868.3, snr=4.0, env=env)
        l_fwd = (c.beta0 + c.n * log_distance(17.3) + frequency_term(868.3) + 7.0 + 2 * 1.5
                 + np.dot(c.epsilon, env) + c.k_gamma * 4.0)
        d = invert_distance(excess_path_loss(rec, g, c, l_fwd), c.n)
        assert d == pytest.approx(17.3, rel=1e-9)

    def test_non_physical_exponent(self):
        with pytest.raises(NumericError):
            invert_distance(10.0, 0.0)
        with pytest.raises(NumericError):
            invert_distance(10.0, -2.0)

    @given(st.floats(-60, 60), st.floats(-60, 60), st.floats(0.5, 6))
    def test_monotone(self, a, b, n):
        lo, hi = sorted((a, b))
        assert invert_distance(lo, n) <= invert_distance(hi, n)

    @given(st.floats(-40, 40), st.floats(0.5, 6))
    def test_decade_per_ten_n_db(self, eta, n):
        assert invert_distance(eta + 10 * n, n) == pytest.approx(10 * invert_distance(eta, n), rel=1e-12)


@pytest.fixture(scope="module")
def campaign():
    records, cfg = small_campaign(n=1500, seed=2)
    return records, cfg.geometry


class TestStreams:
    def test_packet_matches_composition(self, campaign):
        records, geo = campaign
        c = default_coefficients()
        rec = next(iter(iter_rows(records.iloc[[7]])))
        est = estimate_packet(rec, geo[rec.device_id], c)
        eta = excess_path_loss(rec, geo[rec.device_id], c, c.tx_power_dbm - rec.rssi_dbm)
        assert est.distance_m == invert_distance(eta, c.n)
        one = estimate_stream(records.iloc[[7]], geo, c, use_filter=False)
        assert one["distance_m"].iloc[0] == pytest.approx(est.distance_m, rel=1e-14)

    def test_constant_stream(self, campaign):
        records, geo = campaign
        r = records[records.device_id == "EN1"].iloc[:50].copy()
        for col in ("rssi_dbm", "snr_db", "frequency_mhz", "temperature_c", "humidity_pct",
                    "co2_ppm", "pm25_ugm3", "pressure_hpa"):
            r[col] = r[col].iloc[0]
        out = estimate_stream(r, geo, default_coefficients(), use_filter=True)
        assert out["distance_m"].nunique() == 1

    def test_filter_lowers_error(self, campaign):
        records, geo = campaign
        c = default_coefficients()
        raw = estimate_records(records, geo, c, use_filter=False)
        filt = estimate_records(records, geo, c, use_filter=True)
        assert np.sqrt(np.mean(filt["abs_error_m"] ** 2)) < np.sqrt(np.mean(raw["abs_error_m"] ** 2))

    def test_stream_single_device_only(self, campaign):
        records, geo = campaign
        with pytest.raises(DataError):
            estimate_stream(records, geo, default_coefficients())

    def test_unknown_device(self, campaign):
        records, geo = campaign
        with pytest.raises(DataError):
            estimate_records(records, {k: v for k, v in geo.items() if k != "EN4"}, default_coefficients())

    def test_streaming_matches_vectorised(self, campaign):
        records, geo = campaign
        c = default_coefficients()
        ordered = records.sort_values("timestamp", kind="mergesort")
        ranger = StreamingRanger(c, geo, use_filter=True)
        cols = ["device_id", "rssi_dbm", "frequency_mhz", "snr_db", "temperature_c", "humidity_pct",
                "co2_ppm", "pm25_ugm3", "pressure_hpa"]
        online = np.array([ranger.update(*row) for row in ordered[cols].itertuples(index=False, name=None)])
        batch = estimate_records(ordered, geo, c, use_filter=True)["distance_m"].to_numpy()
        np.testing.assert_allclose(online, batch, rtol=1e-12)

    def test_streaming_unknown_device(self, campaign):
        _, geo = campaign
        with pytest.raises(DataError):
            StreamingRanger(default_coefficients(), geo).update("EN99", -90, 868.1, 5, 21, 45, 600, 8, 1010)

    def test_streaming_nan_passthrough(self, campaign):
        _, geo = campaign
        ranger = StreamingRanger(default_coefficients(), geo)
        row = (868.1, 5.0, 21.0, 45.0, 600.0, 8.0, 1010.0)
        assert np.isnan(ranger.update("EN0", float("nan"), *row))
        first = ranger.update("EN0", -70.0, *row)
        assert ranger.update("EN0", float("nan"), *row) == first

    def test_constant_cost_per_packet(self, campaign):
        records, geo = campaign
        stats = time_stream(records.sort_values("timestamp"), geo, default_coefficients(), runs=3)
        assert stats["decile_ratio"] < 2.0


class TestEstimator:
    def test_fit_predict(self, geometry):
        records, _ = small_campaign(n=800, seed=4)
        est = DistanceEstimator(cv_folds=0).fit(records, geometry)
        assert est.coefficients_.variant is MWM_EP_KF
        d = est.predict(records)
        assert d.shape == (len(records),)
        assert abs(est.coefficients_.n - 2.8) < 0.2
        truth = records["device_id"].map({k: g.distance_m for k, g in geometry.items()})
        assert np.median(np.abs(d - truth)) < 3.0

    def test_unfitted(self, geometry):
        from sklearn.exceptions import NotFittedError
        with pytest.raises(NotFittedError):
            DistanceEstimator().predict(small_campaign(n=10)[0])

    def test_from_coefficients(self, geometry):
        records, _ = small_campaign(n=50)
        est = DistanceEstimator.from_coefficients(default_coefficients(), geometry, FilterParams())
        np.testing.assert_array_equal(est.predict(records),
                                      estimate_records(records, geometry, default_coefficients())["distance_m"])
