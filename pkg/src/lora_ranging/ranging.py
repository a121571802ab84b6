"""Closed-form distance inversion of a calibrated path loss model.

With the shadowing term set to zero, the excess loss

    eta = L_obs - beta0 - 20*log10(f) - omega.w - epsilon.e - k_gamma*snr

maps to distance as ``d0 * 10**(eta / (10 n))``. Every packet costs a fixed
amount of work; filtered variants additionally carry one Kalman state per
device.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import datetime

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .dataset import ENV_COLUMNS, FILTERED_RSSI, LinkGeometry, UplinkRecord, format_timestamps
from .exceptions import DataError, NumericError
from .features import (
    D0_M, ModelVariant, RSSISource, covariate_matrix, frequency_term,
    geometry_columns, observed_path_loss,
)
from .fit import ModelCoefficients, fit_model
from .kalman import FilterParams, filter_frame, filter_series

ESTIMATE_COLUMNS = ("timestamp", "device_id", "variant", "eta_db", "distance_m",
                    "distance_true_m", "abs_error_m")
FAR_ESTIMATE_M = 100.0


@dataclass(frozen=True)
class RangeEstimate:
    device_id: str
    timestamp: datetime
    distance_m: float
    eta_db: float
    variant: ModelVariant


def _env_coeffs(coeffs: ModelCoefficients) -> np.ndarray:
    return np.array([*coeffs.epsilon, coeffs.k_gamma])


def excess_path_loss(record: UplinkRecord, geometry: LinkGeometry, coeffs: ModelCoefficients,
                     l_obs: float) -> float:
    """Excess loss of one packet; the SNR used is the gateway-reported raw value."""
    env = [getattr(record, c) for c in ENV_COLUMNS] + [record.snr_db]
    return (l_obs - coeffs.beta0 - frequency_term(record.frequency_mhz)
            - coeffs.omega[0] * geometry.n_brick - coeffs.omega[1] * geometry.n_wood
            - float(np.dot(_env_coeffs(coeffs), env)))


def excess_path_loss_frame(records: pd.DataFrame, geometry: dict[str, LinkGeometry],
                           coeffs: ModelCoefficients, l_obs) -> np.ndarray:
    _, brick, wood = geometry_columns(records, geometry)
    return (np.asarray(l_obs, dtype=float) - coeffs.beta0
            - frequency_term(records["frequency_mhz"].to_numpy(dtype=float))
            - coeffs.omega[0] * brick - coeffs.omega[1] * wood
            - covariate_matrix(records) @ _env_coeffs(coeffs))


def invert_distance(eta, n_hat: float, d0: float = D0_M):
    if not n_hat > 0:
        raise NumericError(f"path loss exponent must be > 0, got {n_hat}")
    out = d0 * np.power(10.0, np.asarray(eta, dtype=float) / (10.0 * n_hat))
    return float(out) if np.ndim(out) == 0 else out


def estimate_packet(record: UplinkRecord, geometry: LinkGeometry, coeffs: ModelCoefficients,
                    rssi_dbm: float | None = None) -> RangeEstimate:
    rssi = record.rssi_dbm if rssi_dbm is None else rssi_dbm
    eta = excess_path_loss(record, geometry, coeffs, observed_path_loss(rssi, coeffs.tx_power_dbm))
    return RangeEstimate(record.device_id, record.timestamp, invert_distance(eta, coeffs.n),
                         eta, coeffs.variant)


def estimate_stream(records: pd.DataFrame, geometry: dict[str, LinkGeometry], coeffs: ModelCoefficients,
                    use_filter: bool | None = None, params: FilterParams = FilterParams()) -> pd.DataFrame:
    """Range every packet of one device's stream (timestamp order).

    ``use_filter`` defaults to the variant's RSSI source. The returned frame
    follows :data:`ESTIMATE_COLUMNS`.
    """
    if use_filter is None:
        use_filter = coeffs.variant.rssi_source is RSSISource.FILTERED
    devices = records["device_id"].unique()
    if len(devices) > 1:
        raise DataError(f"estimate_stream expects one device, got {sorted(devices)}")
    rssi = records["rssi_dbm"].to_numpy(dtype=float)
    if use_filter:
        rssi = filter_series(rssi, params)
    return _estimate_frame(records, geometry, coeffs, rssi)


def estimate_records(records: pd.DataFrame, geometry: dict[str, LinkGeometry], coeffs: ModelCoefficients,
                     use_filter: bool | None = None, params: FilterParams = FilterParams()) -> pd.DataFrame:
    """Multi-device version of :func:`estimate_stream`; each device filtered independently."""
    if use_filter is None:
        use_filter = coeffs.variant.rssi_source is RSSISource.FILTERED
    if use_filter:
        rssi = filter_frame(records, params)[FILTERED_RSSI].to_numpy()
    else:
        rssi = records["rssi_dbm"].to_numpy(dtype=float)
    return _estimate_frame(records, geometry, coeffs, rssi)


def _estimate_frame(records, geometry, coeffs, rssi) -> pd.DataFrame:
    eta = excess_path_loss_frame(records, geometry, coeffs, observed_path_loss(rssi, coeffs.tx_power_dbm))
    dist = invert_distance(eta, coeffs.n)
    truth, _, _ = geometry_columns(records, geometry)
    return pd.DataFrame({
        "timestamp": records["timestamp"].to_numpy(),
        "device_id": records["device_id"].to_numpy(),
        "variant": coeffs.variant.name,
        "eta_db": eta,
        "distance_m": dist,
        "distance_true_m": truth,
        "abs_error_m": np.abs(dist - truth),
    })


def write_estimates_csv(estimates: pd.DataFrame, path) -> None:
    out = estimates[list(ESTIMATE_COLUMNS)].copy()
    out["timestamp"] = format_timestamps(pd.to_datetime(out["timestamp"], utc=True))
    out.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


class StreamingRanger:
    """Per-packet online ranging: filter step, path loss, inversion.

    Holds one Kalman state per device, so ``update`` is O(1) regardless of
    how many packets have been seen.
    """

    def __init__(self, coeffs: ModelCoefficients, geometry: dict[str, LinkGeometry],
                 use_filter: bool = True, params: FilterParams = FilterParams()):
        self.coeffs = coeffs
        self.use_filter = use_filter
        self.params = params
        self._wall_db = {k: coeffs.omega[0] * g.n_brick + coeffs.omega[1] * g.n_wood
                         for k, g in geometry.items()}
        self._state: dict[str, list] = {}
        self._eps = tuple(coeffs.epsilon)
        self._inv_10n = 1.0 / (10.0 * coeffs.n)

    def reset(self) -> None:
        self._state.clear()

    def update(self, device_id, rssi, f_mhz, snr, t, rh, co2, pm, bp) -> float:
        c, prm = self.coeffs, self.params
        try:
            wall_db = self._wall_db[device_id]
        except KeyError:
            raise DataError(f"no geometry for device {device_id!r}") from None
        if self.use_filter:
            st = self._state.get(device_id)
            if not math.isfinite(rssi):
                # pass-through: keep the last estimate, as filter_series does
                if st is None:
                    return math.nan
                x = st[0]
            elif st is None:
                self._state[device_id] = [rssi, prm.p0, prm.r0]
                x = rssi
            else:
                x, p, r = st
                p_prior = p + prm.q
                nu = rssi - x
                a_lo, a_hi = prm.alpha_clip
                alpha = min(max(nu * nu / (p_prior + r), a_lo), a_hi)
                r_new = min(max(prm.gamma * r + (1.0 - prm.gamma) * alpha * r, prm.r_clamp[0]),
                            prm.r_clamp[1])
                k = p_prior / (p_prior + (r_new if prm.gain_uses == "current" else r))
                x += k * nu
                st[0], st[1], st[2] = x, (1.0 - k) * p_prior, r_new
        else:
            x = rssi
        e = self._eps
        eta = (c.tx_power_dbm - x - c.beta0 - 20.0 * math.log10(f_mhz) - wall_db
               - e[0] * t - e[1] * rh - e[2] * co2 - e[3] * pm - e[4] * bp - c.k_gamma * snr)
        return 10.0 ** (eta * self._inv_10n)


class DistanceEstimator(BaseEstimator):
    """Calibrate on training uplinks, then predict per-packet distances.

    ``fit(records, geometry)`` filters the RSSI per device first when the
    variant uses filtered RSSI, and refits the coefficients on that stream.
    """

    def __init__(self, variant="MWM-EP-KF", tx_power_dbm=14.0, cv_folds=5, filter_params=None):
        self.variant = variant
        self.tx_power_dbm = tx_power_dbm
        self.cv_folds = cv_folds
        self.filter_params = filter_params

    def _variant(self) -> ModelVariant:
        v = self.variant
        return v if isinstance(v, ModelVariant) else ModelVariant.from_name(v)

    def _params(self) -> FilterParams:
        return self.filter_params or FilterParams()

    def fit(self, records: pd.DataFrame, geometry: dict[str, LinkGeometry]):
        variant = self._variant()
        if variant.rssi_source is RSSISource.FILTERED:
            records = filter_frame(records, self._params())
        self.coefficients_ = fit_model(records, geometry, variant, self.tx_power_dbm, self.cv_folds)
        self.geometry_ = dict(geometry)
        return self

    @classmethod
    def from_coefficients(cls, coeffs: ModelCoefficients, geometry, filter_params=None):
        est = cls(variant=coeffs.variant, tx_power_dbm=coeffs.tx_power_dbm, filter_params=filter_params)
        est.coefficients_ = coeffs
        est.geometry_ = dict(geometry)
        return est

    def estimate(self, records: pd.DataFrame) -> pd.DataFrame:
        if not hasattr(self, "coefficients_"):
            raise NotFittedError("DistanceEstimator is not fitted")
        return estimate_records(records, self.geometry_, self.coefficients_, params=self._params())

    def predict(self, records: pd.DataFrame) -> np.ndarray:
        return self.estimate(records)["distance_m"].to_numpy()

