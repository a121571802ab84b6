"""Observed path loss and design-matrix construction for the model variants.

The regression target is the frequency-corrected path loss
``L - 20*log10(f_MHz)`` (the frequency coefficient is fixed, not fitted).
Design columns, in order::

    1, 10*log10(d/d0), n_brick, n_wood | T, RH, CO2, PM2.5, BP, SNR

where the block after ``|`` exists only for the environment-aware variant.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .dataset import ENV_COLUMNS, FILTERED_RSSI, LinkGeometry
from .exceptions import DataError

D0_M = 1.0
DEFAULT_TX_POWER_DBM = 14.0

BASE_COLUMNS = ("intercept", "log_dist", "n_brick", "n_wood")
ENV_FEATURES = ("temperature_c", "humidity_pct", "co2_ppm", "pm25_ugm3", "pressure_hpa", "snr_db")


class ModelTag(str, enum.Enum):
    MWM = "MWM"
    MWM_EP = "MWM_EP"


class RSSISource(str, enum.Enum):
    RAW = "RAW"
    FILTERED = "FILTERED"


@dataclass(frozen=True)
class ModelVariant:
    tag: ModelTag = ModelTag.MWM_EP
    rssi_source: RSSISource = RSSISource.RAW

    def __post_init__(self):
        object.__setattr__(self, "tag", ModelTag(self.tag))
        object.__setattr__(self, "rssi_source", RSSISource(self.rssi_source))

    @property
    def name(self) -> str:
        """Display name: MWM, MWM-EP or MWM-EP-KF."""
        base = "MWM" if self.tag is ModelTag.MWM else "MWM-EP"
        return base + ("-KF" if self.rssi_source is RSSISource.FILTERED else "")

    @property
    def columns(self) -> tuple[str, ...]:
        return BASE_COLUMNS + (ENV_FEATURES if self.tag is ModelTag.MWM_EP else ())

    @classmethod
    def from_name(cls, name: str) -> "ModelVariant":
        key = name.strip().upper().replace("_", "-")
        try:
            return VARIANTS[key]
        except KeyError:
            raise ValueError(f"unknown variant {name!r}; expected one of {sorted(VARIANTS)}") from None


MWM = ModelVariant(ModelTag.MWM, RSSISource.RAW)
MWM_EP = ModelVariant(ModelTag.MWM_EP, RSSISource.RAW)
MWM_EP_KF = ModelVariant(ModelTag.MWM_EP, RSSISource.FILTERED)
VARIANTS = {v.name: v for v in (MWM, MWM_EP, MWM_EP_KF, ModelVariant(ModelTag.MWM, RSSISource.FILTERED))}


def observed_path_loss(rssi_dbm, tx_power_dbm: float = DEFAULT_TX_POWER_DBM):
    """Transmit power minus RSSI; fixed antenna/cable gains fold into the intercept."""
    return tx_power_dbm - rssi_dbm


def frequency_term(f_mhz):
    f = np.asarray(f_mhz, dtype=float)
    if np.any(~(f > 0)):
        raise DataError("frequency must be > 0 MHz")
    out = 20.0 * np.log10(f)
    return float(out) if out.ndim == 0 else out


def log_distance(distance_m):
    d = np.asarray(distance_m, dtype=float)
    if np.any(~(d > 0)):
        raise DataError("distance must be > 0 m")
    out = 10.0 * np.log10(d / D0_M)
    return float(out) if out.ndim == 0 else out


def rssi_column(variant: ModelVariant) -> str:
    return FILTERED_RSSI if variant.rssi_source is RSSISource.FILTERED else "rssi_dbm"


def geometry_columns(records: pd.DataFrame, geometry: dict[str, LinkGeometry]):
    """Per-row (distance, n_brick, n_wood) arrays looked up from ``geometry``."""
    devices = records["device_id"].to_numpy()
    unknown = sorted(set(devices) - set(geometry))
    if unknown:
        raise DataError(f"no geometry for devices {unknown}")
    lookup = {k: (g.distance_m, g.n_brick, g.n_wood) for k, g in geometry.items()}
    if len(devices) == 0:
        return np.empty(0), np.empty(0), np.empty(0)
    dist, brick, wood = np.array([lookup[d] for d in devices], dtype=float).T
    return dist, brick, wood


def covariate_matrix(records: pd.DataFrame) -> np.ndarray:
    """[T, RH, CO2, PM2.5, BP, SNR] per row."""
    return records[list(ENV_COLUMNS) + ["snr_db"]].to_numpy(dtype=float)


def build_design_matrix(records: pd.DataFrame, geometry: dict[str, LinkGeometry],
                        variant: ModelVariant, tx_power_dbm: float = DEFAULT_TX_POWER_DBM):
    """Return ``(X, y)`` for ``variant``; ``y`` does not depend on variant.tag."""
    col = rssi_column(variant)
    if col not in records.columns:
        raise DataError(f"variant {variant.name} needs column {col!r}; filter the RSSI first")
    dist, brick, wood = geometry_columns(records, geometry)
    rssi = records[col].to_numpy(dtype=float)
    y = observed_path_loss(rssi, tx_power_dbm) - frequency_term(records["frequency_mhz"].to_numpy(dtype=float))
    blocks = [np.ones(len(records)), log_distance(dist), brick, wood]
    X = np.column_stack(blocks)
    if variant.tag is ModelTag.MWM_EP:
        X = np.hstack([X, covariate_matrix(records)])
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise DataError("non-finite entries in design matrix")
    return X, np.asarray(y, dtype=float)


def column_order_string(variant: ModelVariant) -> str:
    return ",".join(variant.columns)
