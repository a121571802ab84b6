"""Uplink record schema, CSV interchange and the partitioning steps of the
calibration pipeline (deduplication, SF filtering, chronological splits).

Records travel through the package as :class:`pandas.DataFrame` objects whose
columns follow :data:`UPLINK_COLUMNS`. :class:`UplinkRecord` is the row-level
view of the same schema.
"""

from __future__ import annotations

import io
import math
import os
from dataclasses import dataclass, fields
from datetime import datetime
from importlib import resources
from typing import BinaryIO, Iterable, Union

import numpy as np
import pandas as pd

from .exceptions import DataError, SchemaError

Source = Union[str, os.PathLike, BinaryIO, bytes]

UPLINK_COLUMNS = (
    "timestamp",
    "device_id",
    "counter",
    "frequency_mhz",
    "spreading_factor",
    "rssi_dbm",
    "snr_db",
    "temperature_c",
    "humidity_pct",
    "co2_ppm",
    "pm25_ugm3",
    "pressure_hpa",
)
GEOMETRY_COLUMNS = ("device_id", "distance_m", "n_brick", "n_wood")
ENV_COLUMNS = ("temperature_c", "humidity_pct", "co2_ppm", "pm25_ugm3", "pressure_hpa")
FILTERED_RSSI = "rssi_filtered_dbm"

MAX_REJECT_FRACTION = 0.10
DEFAULT_DEDUP_WINDOW = pd.Timedelta(hours=1)


@dataclass(frozen=True)
class UplinkRecord:
    timestamp: datetime
    device_id: str
    counter: int
    frequency_mhz: float
    spreading_factor: int
    rssi_dbm: float
    snr_db: float
    temperature_c: float
    humidity_pct: float
    co2_ppm: float
    pm25_ugm3: float
    pressure_hpa: float

    def __post_init__(self):
        problems = _record_problems(self)
        if problems:
            raise DataError("; ".join(problems))


@dataclass(frozen=True)
class LinkGeometry:
    """Ground truth for one end-node-to-gateway link."""

    device_id: str
    distance_m: float
    n_brick: int
    n_wood: int

    def __post_init__(self):
        if not self.distance_m > 0:
            raise DataError(f"{self.device_id}: distance_m must be > 0, got {self.distance_m}")
        if self.n_brick < 0 or self.n_wood < 0:
            raise DataError(f"{self.device_id}: wall counts must be >= 0")


@dataclass(frozen=True)
class RejectedRow:
    line: int
    reason: str


@dataclass
class ParseResult:
    records: pd.DataFrame
    rejected: list[RejectedRow]

    @property
    def n_rejected(self) -> int:
        return len(self.rejected)


def _record_problems(r) -> list[str]:
    out = []
    if not 7 <= r.spreading_factor <= 12:
        out.append("spreading_factor outside [7, 12]")
    if not r.frequency_mhz > 0:
        out.append("frequency_mhz must be > 0")
    if not 0 <= r.humidity_pct <= 100:
        out.append("humidity_pct outside [0, 100]")
    if not -150 <= r.rssi_dbm <= 0:
        out.append("rssi_dbm outside [-150, 0]")
    if not r.co2_ppm >= 0:
        out.append("co2_ppm must be >= 0")
    if not r.pm25_ugm3 >= 0:
        out.append("pm25_ugm3 must be >= 0")
    if r.counter < 0:
        out.append("counter must be >= 0")
    return out


def empty_records() -> pd.DataFrame:
    frame = pd.DataFrame({c: pd.Series(dtype="float64") for c in UPLINK_COLUMNS})
    frame["timestamp"] = pd.Series(dtype="datetime64[us, UTC]")
    frame["device_id"] = pd.Series(dtype="object")
    frame["counter"] = pd.Series(dtype="int64")
    frame["spreading_factor"] = pd.Series(dtype="int64")
    return frame


def records_from_rows(rows: Iterable[UplinkRecord]) -> pd.DataFrame:
    rows = list(rows)
    if not rows:
        return empty_records()
    frame = pd.DataFrame([{f.name: getattr(r, f.name) for f in fields(UplinkRecord)} for r in rows])
    frame["timestamp"] = pd.to_datetime(frame["timestamp"], utc=True).astype("datetime64[us, UTC]")
    return frame[list(UPLINK_COLUMNS)]


def iter_rows(records: pd.DataFrame) -> Iterable[UplinkRecord]:
    for row in records[list(UPLINK_COLUMNS)].itertuples(index=False):
        values = row._asdict()
        values["timestamp"] = values["timestamp"].to_pydatetime()
        yield UplinkRecord(**values)


def _read_bytes(source: Source) -> bytes:
    if isinstance(source, bytes):
        return source
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return fh.read()
    return source.read()


def parse_uplink_csv(source: Source) -> ParseResult:
    """Parse an uplink CSV.

    Rows with unparsable fields or field-invariant violations are rejected
    and reported with their 1-based file line number. A malformed header, or
    more than 10% rejected rows, raises :class:`SchemaError`.
    """
    raw = _read_bytes(source).decode("utf-8")
    header = raw.split("\n", 1)[0].strip().lstrip("﻿")
    columns = [c.strip() for c in header.split(",")] if header else []
    if tuple(columns) != UPLINK_COLUMNS:
        raise SchemaError(_column_diff(UPLINK_COLUMNS, columns))

    text = pd.read_csv(io.StringIO(raw), dtype=str, keep_default_na=False, skip_blank_lines=True)
    n = len(text)
    if n == 0:
        return ParseResult(empty_records(), [])
    lines = np.arange(n) + 2
    reasons = pd.Series([""] * n, dtype=object)

    def flag(mask, why):
        mask = np.asarray(mask, dtype=bool)
        reasons[mask & (reasons == "").to_numpy()] = why

    out = pd.DataFrame(index=text.index)
    out["timestamp"] = pd.to_datetime(text["timestamp"], utc=True, format="ISO8601", errors="coerce")
    flag(out["timestamp"].isna(), "timestamp: not RFC 3339")
    out["device_id"] = text["device_id"].str.strip()
    flag(out["device_id"] == "", "device_id: empty")
    for col in UPLINK_COLUMNS[2:]:
        values = pd.to_numeric(text[col], errors="coerce")
        flag(~np.isfinite(values.to_numpy(dtype=float)), f"{col}: not a finite number")
        out[col] = values
    for col in ("counter", "spreading_factor"):
        v = out[col].to_numpy(dtype=float)
        flag(np.isfinite(v) & (v != np.round(v)), f"{col}: not an integer")

    checks = [
        (~out["spreading_factor"].between(7, 12), "spreading_factor outside [7, 12]"),
        (~(out["frequency_mhz"] > 0), "frequency_mhz must be > 0"),
        (~out["humidity_pct"].between(0, 100), "humidity_pct outside [0, 100]"),
        (~out["rssi_dbm"].between(-150, 0), "rssi_dbm outside [-150, 0]"),
        (~(out["co2_ppm"] >= 0), "co2_ppm must be >= 0"),
        (~(out["pm25_ugm3"] >= 0), "pm25_ugm3 must be >= 0"),
        (~(out["counter"] >= 0), "counter must be >= 0"),
    ]
    for mask, why in checks:
        flag(mask, why)

    bad = (reasons != "").to_numpy()
    rejected = [RejectedRow(int(line), why) for line, why in zip(lines[bad], reasons[bad])]
    if len(rejected) > MAX_REJECT_FRACTION * n:
        raise SchemaError(
            f"{len(rejected)} of {n} rows rejected (limit {MAX_REJECT_FRACTION:.0%}); "
            f"first: line {rejected[0].line}: {rejected[0].reason}"
        )
    good = out.loc[~bad].reset_index(drop=True)
    good["timestamp"] = good["timestamp"].astype("datetime64[us, UTC]")
    good["counter"] = good["counter"].astype("int64")
    good["spreading_factor"] = good["spreading_factor"].astype("int64")
    return ParseResult(good[list(UPLINK_COLUMNS)], rejected)


def _column_diff(expected, got) -> str:
    missing = [c for c in expected if c not in got]
    extra = [c for c in got if c not in expected]
    msg = f"header mismatch: expected {','.join(expected)}"
    if missing:
        msg += f"; missing {missing}"
    if extra:
        msg += f"; unexpected {extra}"
    if not missing and not extra:
        msg += "; columns out of order"
    return msg


def format_timestamps(ts: pd.Series) -> pd.Series:
    return ts.dt.tz_convert("UTC").dt.strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def write_uplink_csv(records: pd.DataFrame, path) -> None:
    out = records[list(UPLINK_COLUMNS)].copy()
    out["timestamp"] = format_timestamps(out["timestamp"])
    out.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def deduplicate(records: pd.DataFrame, window=DEFAULT_DEDUP_WINDOW) -> pd.DataFrame:
    """Keep the first occurrence of each (device_id, counter) key.

    A repeat of a key counts as a duplicate only within ``window`` of the
    kept record, so wrapped-around 16-bit counters are not collapsed.
    Output is sorted by (device_id, timestamp).
    """
    if len(records) == 0:
        return records.reset_index(drop=True)
    window = pd.Timedelta(window)
    ordered = records.sort_values(["device_id", "counter", "timestamp"], kind="mergesort")
    same_key = (ordered["device_id"].eq(ordered["device_id"].shift())
                & ordered["counter"].eq(ordered["counter"].shift())).to_numpy()
    drop = np.zeros(len(ordered), dtype=bool)
    if same_key.any():
        ts = ordered["timestamp"].to_numpy()
        group = np.cumsum(~same_key)
        repeated = np.isin(group, np.unique(group[same_key]))
        kept_at = None
        for i in np.flatnonzero(repeated):
            if not same_key[i]:
                kept_at = ts[i]
            elif ts[i] - kept_at <= window:
                drop[i] = True
            else:
                kept_at = ts[i]
    kept = ordered.loc[~drop]
    return kept.sort_values(["device_id", "timestamp"], kind="mergesort").reset_index(drop=True)


def filter_spreading_factor(records: pd.DataFrame, sf_min: int = 7, sf_max: int = 10) -> pd.DataFrame:
    if sf_min > sf_max:
        raise ValueError(f"sf_min ({sf_min}) > sf_max ({sf_max})")
    keep = records["spreading_factor"].between(sf_min, sf_max)
    return records.loc[keep].reset_index(drop=True)


def sort_chronologically(records: pd.DataFrame) -> pd.DataFrame:
    return records.sort_values(["timestamp", "device_id"], kind="mergesort").reset_index(drop=True)


def _require_sorted(records: pd.DataFrame) -> None:
    if not records["timestamp"].is_monotonic_increasing:
        raise DataError("records must be sorted by timestamp")


def chronological_split(records: pd.DataFrame, train_fraction: float = 0.8):
    """Split into the first ``floor(N * train_fraction)`` records and the rest."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    _require_sorted(records)
    # guard against 0.8 * N landing a hair below an integer
    n_train = math.floor(len(records) * train_fraction + 1e-9)
    return records.iloc[:n_train].reset_index(drop=True), records.iloc[n_train:].reset_index(drop=True)


def fold_sizes(n: int, k: int) -> list[int]:
    base, extra = divmod(n, k)
    return [base + 1 if j < extra else base for j in range(k)]


def kfold_chronological(records: pd.DataFrame, k: int = 5):
    """Contiguous k-fold partition; remainder rows go to the earliest blocks."""
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > len(records):
        raise DataError(f"k={k} exceeds the number of records ({len(records)})")
    _require_sorted(records)
    bounds = np.concatenate([[0], np.cumsum(fold_sizes(len(records), k))])
    folds = []
    for j in range(k):
        lo, hi = bounds[j], bounds[j + 1]
        val = records.iloc[lo:hi].reset_index(drop=True)
        train = pd.concat([records.iloc[:lo], records.iloc[hi:]]).reset_index(drop=True)
        folds.append((train, val))
    return folds


def load_geometry(source: Source) -> dict[str, LinkGeometry]:
    raw = _read_bytes(source).decode("utf-8")
    frame = pd.read_csv(io.StringIO(raw), dtype={"device_id": str})
    frame.columns = [c.strip() for c in frame.columns]
    missing = [c for c in GEOMETRY_COLUMNS if c not in frame.columns]
    if missing:
        raise SchemaError(f"geometry file missing columns {missing}")
    dupes = frame["device_id"][frame["device_id"].duplicated()].tolist()
    if dupes:
        raise SchemaError(f"duplicate device_id in geometry: {dupes}")
    geometry = {}
    for row in frame.itertuples(index=False):
        if float(row.n_brick) != int(row.n_brick) or float(row.n_wood) != int(row.n_wood):
            raise SchemaError(f"{row.device_id}: wall counts must be integers")
        geometry[row.device_id] = LinkGeometry(
            str(row.device_id), float(row.distance_m), int(row.n_brick), int(row.n_wood)
        )
    return geometry


def write_geometry(geometry: dict[str, LinkGeometry], path) -> None:
    frame = pd.DataFrame([vars(g) for g in geometry.values()], columns=list(GEOMETRY_COLUMNS))
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def sample_geometry() -> dict[str, LinkGeometry]:
    """Six-link office layout bundled with the package.

    Wall counts follow the reference deployment; distances are representative
    values inside its 40 m radius.
    """
    data = resources.files("lora_ranging").joinpath("data/sample_geometry.csv").read_bytes()
    return load_geometry(data)
