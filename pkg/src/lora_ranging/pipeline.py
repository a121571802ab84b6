"""End-to-end orchestration shared by the CLI and the acceptance suite."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .anomaly import filter_all_devices
from .config import RunConfig
from .dataset import (
    FILTERED_RSSI, LinkGeometry, chronological_split, deduplicate, filter_spreading_factor,
    sort_chronologically,
)
from .evaluate import EvaluationReport, build_report
from .exceptions import NumericError
from .features import ModelVariant, RSSISource
from .fit import ModelCoefficients, evaluate_fit, fit_model
from .kalman import FilterParams, filter_frame
from .ranging import StreamingRanger, estimate_records

log = logging.getLogger(__name__)


@dataclass
class PreparedData:
    train: pd.DataFrame
    test: pd.DataFrame
    counts: dict = field(default_factory=dict)


def prepare(records: pd.DataFrame, cfg: RunConfig) -> PreparedData:
    """Dedup, SF filter, device-wise anomaly filtering, chronological split.

    Both partitions come back with a per-device filtered RSSI column; the
    filter restarts at the beginning of each partition.
    """
    counts = {"input": len(records)}
    out = deduplicate(records, pd.Timedelta(seconds=cfg["pipeline.dedup_window_s"]))
    counts["after_dedup"] = len(out)
    out = filter_spreading_factor(out, cfg["pipeline.sf_min"], cfg["pipeline.sf_max"])
    counts["after_sf_filter"] = len(out)
    out, dropped = filter_all_devices(out, contamination=cfg["anomaly.contamination"], seed=cfg.anomaly_seed,
                                      n_trees=cfg["anomaly.n_trees"], subsample=cfg["anomaly.subsample"])
    counts["anomalies_dropped"] = len(dropped)
    train, test = chronological_split(sort_chronologically(out), cfg["pipeline.train_fraction"])
    params = cfg.filter_params()
    train = sort_chronologically(filter_frame(train, params))
    test = sort_chronologically(filter_frame(test, params))
    counts["train"], counts["test"] = len(train), len(test)
    return PreparedData(train, test, counts)


def fit_variants(train: pd.DataFrame, geometry: dict[str, LinkGeometry], cfg: RunConfig,
                 test: pd.DataFrame | None = None) -> dict[str, ModelCoefficients]:
    models = {}
    for name in cfg.variants:
        variant = ModelVariant.from_name(name)
        c = fit_model(train, geometry, variant, cfg["pipeline.tx_power_dbm"], cfg["pipeline.cv_folds"])
        if test is not None and len(test):
            m = evaluate_fit(c, test, geometry)
            c.diagnostics.update({"n_test": len(test), "test_rmse_db": m.rmse, "test_r2": m.r2,
                                  "test_residual_skewness": m.skewness})
        models[variant.name] = c
    return models


def evaluate_variants(test: pd.DataFrame, geometry, models: dict[str, ModelCoefficients], cfg: RunConfig,
                      latency: dict | None = None) -> tuple[EvaluationReport, dict[str, pd.DataFrame]]:
    params = cfg.filter_params()
    estimates, path_loss = {}, {}
    for name, c in models.items():
        estimates[name] = estimate_records(test, geometry, c, params=params)
        path_loss[name] = evaluate_fit(c, test, geometry)
    rssi = test[["device_id", "rssi_dbm", FILTERED_RSSI]] if FILTERED_RSSI in test else test[["device_id", "rssi_dbm"]]
    report = build_report(estimates, rssi=rssi, path_loss=path_loss, config_text=cfg.to_text(),
                          fingerprint=cfg.fingerprint(), latency=latency)
    return report, estimates


def _stream_rows(test: pd.DataFrame):
    cols = ["device_id", "rssi_dbm", "frequency_mhz", "snr_db", "temperature_c", "humidity_pct",
            "co2_ppm", "pm25_ugm3", "pressure_hpa"]
    return list(test[cols].itertuples(index=False, name=None))


def time_stream(test: pd.DataFrame, geometry, coeffs: ModelCoefficients, params: FilterParams = FilterParams(),
                runs: int = 10, use_filter: bool | None = None, n_chunks: int = 10) -> dict:
    """Time per-packet filter + path loss + inversion over the test stream.

    Each run replays the whole stream through a fresh :class:`StreamingRanger`.
    Returns the mean and std (across runs) of the per-packet time in
    microseconds, plus the mean time of the first and last stream deciles.
    """
    if use_filter is None:
        use_filter = coeffs.variant.rssi_source is RSSISource.FILTERED
    rows = _stream_rows(test)
    n = len(rows)
    if n == 0:
        raise NumericError("no packets to time")
    bounds = np.linspace(0, n, n_chunks + 1).astype(int)
    per_run, chunk_us = [], np.zeros((runs, n_chunks))
    for run in range(runs):
        ranger = StreamingRanger(coeffs, geometry, use_filter, params)
        update = ranger.update
        total = 0
        for j in range(n_chunks):
            chunk = rows[bounds[j]:bounds[j + 1]]
            t0 = time.perf_counter_ns()
            for row in chunk:
                update(*row)
            dt = time.perf_counter_ns() - t0
            total += dt
            chunk_us[run, j] = dt / 1e3 / max(len(chunk), 1)
        per_run.append(total / 1e3 / n)
    per_run = np.array(per_run)
    deciles = chunk_us.mean(axis=0)
    return {
        "packets": n,
        "runs": runs,
        "mean_us": float(per_run.mean()),
        "std_us": float(per_run.std(ddof=1)) if runs > 1 else 0.0,
        "first_decile_us": float(deciles[0]),
        "last_decile_us": float(deciles[-1]),
        "decile_ratio": float(deciles[-1] / deciles[0]) if deciles[0] > 0 else math.inf,
    }
