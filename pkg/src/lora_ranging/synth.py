"""Synthetic measurement campaigns from the environment-aware forward model.

Per packet::

    L_base = beta0 + 10 n log10(d) + 20 log10(f) + omega.w + epsilon.e
    snr    = a - b (L_base - l_min) + noise
    L      = L_base + k_gamma * snr + psi,        psi ~ N(0, sigma_psi^2)
    rssi   = tx_power - L  (+ burst offset while an outlier burst is active)

SNR is driven by the deterministic part of the loss only, which keeps it
exogenous to the shadowing term and the SNR coefficient identifiable.
"""

from __future__ import annotations

import glob
import os
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .anomaly import stable_hash
from .dataset import (
    ENV_COLUMNS, UPLINK_COLUMNS, LinkGeometry, empty_records, load_geometry, parse_uplink_csv,
    sample_geometry, write_geometry, write_uplink_csv,
)
from .exceptions import SchemaError
from .features import MWM_EP, frequency_term, log_distance
from .fit import ModelCoefficients

EU868_CHANNELS_MHZ = (868.1, 868.3, 868.5)
GEOMETRY_FILE = "geometry.csv"


@dataclass(frozen=True)
class Sinusoid:
    mean: float
    amplitude: float
    period_h: float = 24.0
    jitter: float = 0.0


@dataclass(frozen=True)
class OutlierModel:
    rate: float = 0.005          # probability that a burst starts at a given packet
    magnitude_db: float = -15.0  # added to RSSI while the burst lasts
    burst_length: int = 5

    def __post_init__(self):
        if not 0 <= self.rate <= 1:
            raise ValueError("outlier rate must lie in [0, 1]")


@dataclass(frozen=True)
class SNRModel:
    a_db: float = 10.0
    slope: float = 0.15
    l_min_db: float = 100.0
    noise_db: float = 2.0


def default_environment() -> dict[str, Sinusoid]:
    return {
        "temperature_c": Sinusoid(21.0, 3.0, jitter=0.3),
        "humidity_pct": Sinusoid(45.0, 10.0, jitter=1.5),
        "co2_ppm": Sinusoid(600.0, 250.0, jitter=40.0),
        "pm25_ugm3": Sinusoid(8.0, 5.0, jitter=1.0),
        "pressure_hpa": Sinusoid(1010.0, 8.0, jitter=0.5),
    }


def default_coefficients() -> ModelCoefficients:
    return ModelCoefficients(
        variant=MWM_EP, beta0=30.0, n=2.8, omega=(7.0, 1.5),
        epsilon=(-0.102, -0.082, 0.0015, 0.04, -0.005), k_gamma=-0.4,
    )


@dataclass
class SynthConfig:
    coefficients: ModelCoefficients = field(default_factory=default_coefficients)
    geometry: dict[str, LinkGeometry] = field(default_factory=sample_geometry)
    n_packets_per_device: int = 10_000
    shadowing_sigma_db: float = 4.0
    outlier: OutlierModel = field(default_factory=OutlierModel)
    env_dynamics: dict[str, Sinusoid] = field(default_factory=default_environment)
    snr_model: SNRModel = field(default_factory=SNRModel)
    tx_power_dbm: float = 14.0
    seed: int = 0
    interval_s: float = 60.0
    start: str = "2024-01-01T00:00:00Z"
    # fraction of packets with SF11/SF12 (left for the SF filter to remove)
    high_sf_fraction: float = 0.0
    # fraction of packets received twice by the gateway
    duplicate_rate: float = 0.0

    def __post_init__(self):
        if self.shadowing_sigma_db < 0:
            raise ValueError("shadowing_sigma_db must be >= 0")
        missing = set(ENV_COLUMNS) - set(self.env_dynamics)
        if missing:
            raise ValueError(f"env_dynamics lacks {sorted(missing)}")

    def noiseless(self) -> "SynthConfig":
        return replace(self, shadowing_sigma_db=0.0, outlier=replace(self.outlier, rate=0.0),
                       duplicate_rate=0.0, high_sf_fraction=0.0)


def _device_rng(seed: int, device_id: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), stable_hash(device_id)]))


def _burst_offsets(rng, n: int, model: OutlierModel) -> np.ndarray:
    offsets = np.zeros(n)
    if model.rate <= 0 or model.burst_length <= 0:
        return offsets
    starts = rng.random(n) < model.rate
    i = 0
    while i < n:
        if starts[i]:
            offsets[i:i + model.burst_length] = model.magnitude_db
            i += model.burst_length
        else:
            i += 1
    return offsets


def _generate_device(cfg: SynthConfig, index: int, geo: LinkGeometry) -> pd.DataFrame:
    rng = _device_rng(cfg.seed, geo.device_id)
    n = cfg.n_packets_per_device
    c = cfg.coefficients
    start = pd.Timestamp(cfg.start)
    # devices transmit on the same cadence, staggered within the interval
    offset_s = index * cfg.interval_s / max(len(cfg.geometry), 1) / 2
    t_s = offset_s + cfg.interval_s * np.arange(n)
    hours = t_s / 3600.0

    env = {}
    for name in ENV_COLUMNS:
        s = cfg.env_dynamics[name]
        phase = rng.uniform(0, 2 * np.pi)
        env[name] = (s.mean + s.amplitude * np.sin(2 * np.pi * hours / s.period_h + phase)
                     + s.jitter * rng.standard_normal(n))
    env["humidity_pct"] = np.clip(env["humidity_pct"], 0.0, 100.0)
    for name in ("co2_ppm", "pm25_ugm3"):
        env[name] = np.maximum(env[name], 0.0)

    freq = rng.choice(np.array(EU868_CHANNELS_MHZ), size=n)
    sf = rng.choice(np.arange(7, 11), size=n, p=[0.55, 0.2, 0.15, 0.1])
    if cfg.high_sf_fraction > 0:
        high = rng.random(n) < cfg.high_sf_fraction
        sf = np.where(high, rng.choice([11, 12], size=n), sf)

    env_matrix = np.column_stack([env[name] for name in ENV_COLUMNS])
    l_base = (c.beta0 + c.n * log_distance(np.full(n, geo.distance_m)) + frequency_term(freq)
              + c.omega[0] * geo.n_brick + c.omega[1] * geo.n_wood + env_matrix @ np.asarray(c.epsilon))
    sm = cfg.snr_model
    snr = sm.a_db - sm.slope * (l_base - sm.l_min_db) + sm.noise_db * rng.standard_normal(n)
    psi = cfg.shadowing_sigma_db * rng.standard_normal(n)
    loss = l_base + c.k_gamma * snr + psi
    rssi = cfg.tx_power_dbm - loss + _burst_offsets(rng, n, cfg.outlier)

    frame = pd.DataFrame({
        "timestamp": start + pd.to_timedelta(np.round(t_s * 1e6).astype(np.int64), unit="us"),
        "device_id": geo.device_id,
        "counter": np.arange(n, dtype=np.int64) % 65536,
        "frequency_mhz": freq,
        "spreading_factor": sf.astype(np.int64),
        "rssi_dbm": rssi,
        "snr_db": snr,
        **env,
    })
    if cfg.duplicate_rate > 0 and n:
        dup = frame.loc[rng.random(n) < cfg.duplicate_rate].copy()
        dup["timestamp"] = dup["timestamp"] + pd.Timedelta(milliseconds=250)
        frame = pd.concat([frame, dup]).sort_values("timestamp", kind="mergesort")
    frame["timestamp"] = frame["timestamp"].astype("datetime64[us, UTC]")
    return frame[list(UPLINK_COLUMNS)].reset_index(drop=True)


def generate_campaign(config: SynthConfig):
    """Return ``(records, truth)``; records are ordered by device then time."""
    frames = [_generate_device(config, i, g) for i, g in enumerate(config.geometry.values())]
    records = pd.concat(frames, ignore_index=True) if frames else empty_records()
    truth = {k: g.distance_m for k, g in config.geometry.items()}
    return records, truth


def export_campaign(records: pd.DataFrame, geometry: dict[str, LinkGeometry], out_dir) -> list[str]:
    """Write one uplink CSV per device plus ``geometry.csv``; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for dev in geometry:
        path = os.path.join(out_dir, f"uplinks_{dev}.csv")
        write_uplink_csv(records.loc[records["device_id"] == dev], path)
        paths.append(path)
    geo_path = os.path.join(out_dir, GEOMETRY_FILE)
    write_geometry(geometry, geo_path)
    return paths + [geo_path]


@dataclass
class ReplayData:
    records: pd.DataFrame
    geometry: dict[str, LinkGeometry]
    rejected: dict[str, list]


def replay_external(dataset_dir, geometry_path=None) -> ReplayData:
    """Load every uplink CSV in ``dataset_dir`` together with its geometry file."""
    geometry_path = geometry_path or os.path.join(dataset_dir, GEOMETRY_FILE)
    if not os.path.isfile(geometry_path):
        raise SchemaError(f"geometry file not found: {geometry_path}")
    geometry = load_geometry(geometry_path)
    paths = sorted(p for p in glob.glob(os.path.join(dataset_dir, "*.csv"))
                   if os.path.abspath(p) != os.path.abspath(geometry_path))
    if not paths:
        raise SchemaError(f"no uplink CSV files in {dataset_dir}")
    frames, rejected = [], {}
    for path in paths:
        try:
            result = parse_uplink_csv(path)
        except SchemaError as exc:
            raise SchemaError(f"{os.path.basename(path)}: {exc}") from exc
        frames.append(result.records)
        if result.rejected:
            rejected[os.path.basename(path)] = result.rejected
    records = pd.concat(frames, ignore_index=True)
    return ReplayData(records, geometry, rejected)
