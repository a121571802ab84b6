"""Ranging and path-loss error evaluation, exact Wilcoxon tests, report files."""

from __future__ import annotations

import csv
import itertools
import math
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from .exceptions import DataError
from .fit import RegressionMetrics
from .stats import UNDEFINED, fmt, skewness

EXACT_WILCOXON_MAX_N = 20
DEVICE_METRICS = ("mae_m", "median_ae_m", "mean_rel_err_pct", "median_rel_err_pct")
FAR_ESTIMATE_M = 100.0


def default_thresholds() -> np.ndarray:
    """0 to 50 m in 0.5 m steps."""
    return np.round(np.arange(0.0, 50.0 + 0.25, 0.5), 10)


def lower_median(values) -> float:
    values = np.sort(np.asarray(values, dtype=float))
    return float(values[(len(values) - 1) // 2])


@dataclass(frozen=True)
class DistanceMetrics:
    rmse: float
    mae: float
    median_ae: float
    mean_rel_err_pct: float
    median_rel_err_pct: float


def distance_metrics(estimates, truth) -> DistanceMetrics:
    est = np.asarray(estimates, dtype=float)
    tru = np.asarray(truth, dtype=float)
    if est.shape != tru.shape:
        raise DataError(f"length mismatch: {est.shape} vs {tru.shape}")
    if est.size == 0:
        raise DataError("no estimates")
    if np.any(~(tru > 0)):
        raise DataError("true distances must be > 0")
    err = np.abs(est - tru)
    rel = err / tru * 100.0
    return DistanceMetrics(
        rmse=float(np.sqrt(np.mean(err ** 2))),
        mae=float(np.mean(err)),
        median_ae=lower_median(err),
        mean_rel_err_pct=float(np.mean(rel)),
        median_rel_err_pct=lower_median(rel),
    )


def cde_curve(abs_errors, thresholds=None) -> list[tuple[float, float]]:
    """Fraction of errors at or below each threshold."""
    err = np.sort(np.asarray(abs_errors, dtype=float))
    if err.size == 0:
        raise DataError("empty error sample")
    thresholds = default_thresholds() if thresholds is None else np.asarray(thresholds, dtype=float)
    if np.any(np.diff(thresholds) < 0):
        raise DataError("thresholds must be sorted ascending")
    counts = np.searchsorted(err, thresholds, side="right")
    return [(float(t), c / err.size) for t, c in zip(thresholds, counts)]


@dataclass(frozen=True)
class WilcoxonResult:
    p_value: float
    statistic: float   # W+: sum of ranks of the positive deltas
    n: int             # deltas used after dropping zeros
    n_zero: int


def wilcoxon_exact(deltas) -> WilcoxonResult:
    """Exact two-sided Wilcoxon signed-rank test.

    Zero deltas are dropped; tied magnitudes get average ranks. The null
    distribution of W+ is counted exactly over all 2**n sign assignments
    (by subset-sum convolution on doubled ranks), so ties are handled
    without a normal approximation. ``p = min(1, 2 * smaller tail)``.
    """
    d = np.asarray(deltas, dtype=float)
    nz = d[d != 0]
    n_zero = int(d.size - nz.size)
    n = int(nz.size)
    if n == 0:
        return WilcoxonResult(UNDEFINED, UNDEFINED, 0, n_zero)
    if n > EXACT_WILCOXON_MAX_N:
        raise DataError(f"exact test limited to n <= {EXACT_WILCOXON_MAX_N}, got {n}")
    doubled = np.rint(2 * rankdata(np.abs(nz), method="average")).astype(np.int64)
    counts = np.zeros(int(doubled.sum()) + 1, dtype=np.int64)
    counts[0] = 1
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:-r]
        counts = counts + shifted
    w2 = int(doubled[nz > 0].sum())
    total = 2 ** n
    lower = counts[: w2 + 1].sum() / total
    upper = counts[w2:].sum() / total
    return WilcoxonResult(min(1.0, 2.0 * min(lower, upper)), w2 / 2, n, n_zero)


@dataclass(frozen=True)
class Dispersion:
    std_raw: float
    std_filt: float
    reduction_pct: float
    skew_raw: float
    skew_filt: float


def rssi_dispersion(raw, filtered) -> Dispersion:
    raw = np.asarray(raw, dtype=float)
    filt = np.asarray(filtered, dtype=float)
    if raw.shape != filt.shape or raw.size < 2:
        raise DataError("need two equal-length sequences of at least 2 values")
    s_raw = float(np.std(raw, ddof=1))
    s_filt = float(np.std(filt, ddof=1))
    reduction = UNDEFINED if s_raw == 0 else (1.0 - s_filt / s_raw) * 100.0
    return Dispersion(s_raw, s_filt, reduction, skewness(raw), skewness(filt))


def demeaned_by_device(values, devices) -> np.ndarray:
    """Remove each device's mean so pooled spread measures temporal volatility."""
    s = pd.Series(np.asarray(values, dtype=float))
    return (s - s.groupby(np.asarray(devices)).transform("mean")).to_numpy()


@dataclass
class EvaluationReport:
    per_variant: dict = field(default_factory=dict)
    per_device: dict = field(default_factory=dict)
    cde_curves: dict = field(default_factory=dict)
    pairwise_tests: dict = field(default_factory=dict)
    rssi_stats: dict = field(default_factory=dict)
    rssi_dispersion: Dispersion | None = None
    path_loss: dict = field(default_factory=dict)
    latency: dict = field(default_factory=dict)
    config_text: str = ""
    fingerprint: str = ""

    @property
    def variants(self) -> list[str]:
        return list(self.per_variant)


def build_report(estimates: dict[str, pd.DataFrame], rssi: pd.DataFrame | None = None,
                 path_loss: dict[str, RegressionMetrics] | None = None, thresholds=None,
                 config_text: str = "", fingerprint: str = "", latency: dict | None = None) -> EvaluationReport:
    """Aggregate per-variant estimate frames (see ``ranging.ESTIMATE_COLUMNS``).

    ``rssi`` optionally holds ``device_id``, ``rssi_dbm`` and
    ``rssi_filtered_dbm`` for the evaluated packets.
    """
    report = EvaluationReport(config_text=config_text, fingerprint=fingerprint,
                              path_loss=dict(path_loss or {}), latency=dict(latency or {}))
    for name, est in estimates.items():
        m = distance_metrics(est["distance_m"], est["distance_true_m"])
        report.per_variant[name] = {
            "rmse_m": m.rmse, "mae_m": m.mae, "median_ae_m": m.median_ae,
            "mean_rel_err_pct": m.mean_rel_err_pct, "median_rel_err_pct": m.median_rel_err_pct,
            "n_packets": len(est), "n_over_100m": int((est["distance_m"] > FAR_ESTIMATE_M).sum()),
        }
        report.cde_curves[name] = cde_curve(est["abs_error_m"], thresholds)
        for dev, g in est.groupby("device_id", sort=True):
            dm = distance_metrics(g["distance_m"], g["distance_true_m"])
            rel = (g["abs_error_m"] / g["distance_true_m"] * 100.0).to_numpy()
            q1, q2, q3 = np.quantile(rel, [0.25, 0.5, 0.75])
            report.per_device[(name, dev)] = {
                "mae_m": dm.mae, "median_ae_m": dm.median_ae, "mean_rel_err_pct": dm.mean_rel_err_pct,
                "median_rel_err_pct": dm.median_rel_err_pct,
                "rel_q1_pct": float(q1), "rel_q2_pct": float(q2), "rel_q3_pct": float(q3),
                "n_packets": len(g),
            }
    for a, b in itertools.combinations(estimates, 2):
        devices = sorted({d for v, d in report.per_device if v == a} & {d for v, d in report.per_device if v == b})
        for metric in DEVICE_METRICS:
            deltas = [report.per_device[(a, d)][metric] - report.per_device[(b, d)][metric] for d in devices]
            res = wilcoxon_exact(deltas) if deltas else WilcoxonResult(UNDEFINED, UNDEFINED, 0, 0)
            report.pairwise_tests[(a, b, metric)] = {
                "p_value": res.p_value, "statistic": res.statistic, "n": res.n, "n_zero": res.n_zero,
                "n_a_better": int(sum(x < 0 for x in deltas)),
            }
    if rssi is not None and len(rssi) >= 2:
        devices = rssi["device_id"].to_numpy()
        raw = demeaned_by_device(rssi["rssi_dbm"], devices)
        report.rssi_stats["RAW"] = {"std_db": float(np.std(raw, ddof=1)), "skewness": skewness(raw)}
        if "rssi_filtered_dbm" in rssi:
            filt = demeaned_by_device(rssi["rssi_filtered_dbm"], devices)
            report.rssi_stats["FILTERED"] = {"std_db": float(np.std(filt, ddof=1)), "skewness": skewness(filt)}
            report.rssi_dispersion = rssi_dispersion(raw, filt)
    return report


def _cell(v) -> str:
    if v is UNDEFINED:
        return "undefined"
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".10g")
    return str(v)


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def emit_report(report: EvaluationReport, out_dir) -> list[str]:
    """Write metrics.csv, per_device.csv, cde_<variant>.csv, tests.csv and summary.txt."""
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out_dir}: {exc}") from exc
    if not os.access(out_dir, os.W_OK):
        raise DataError(f"output directory not writable: {out_dir}")
    paths = []

    cols = ["rmse_m", "mae_m", "median_ae_m", "mean_rel_err_pct", "median_rel_err_pct", "n_packets", "n_over_100m"]
    pl_cols = ["pl_rmse_db", "pl_r2", "pl_residual_skewness"]
    rows = []
    for name, m in report.per_variant.items():
        pl = report.path_loss.get(name)
        pl_vals = [pl.rmse, pl.r2, pl.skewness] if pl else ["", "", ""]
        rows.append([name] + [m[c] for c in cols] + pl_vals)
    paths.append(os.path.join(out_dir, "metrics.csv"))
    _write_csv(paths[-1], ["variant"] + cols + pl_cols, rows)

    dcols = list(DEVICE_METRICS) + ["rel_q1_pct", "rel_q2_pct", "rel_q3_pct", "n_packets"]
    paths.append(os.path.join(out_dir, "per_device.csv"))
    _write_csv(paths[-1], ["variant", "device_id"] + dcols,
               [[v, d] + [m[c] for c in dcols] for (v, d), m in report.per_device.items()])

    for name, curve in report.cde_curves.items():
        paths.append(os.path.join(out_dir, f"cde_{name}.csv"))
        _write_csv(paths[-1], ["threshold_m", "fraction"], curve)

    tcols = ["p_value", "statistic", "n", "n_zero", "n_a_better"]
    paths.append(os.path.join(out_dir, "tests.csv"))
    _write_csv(paths[-1], ["variant_a", "variant_b", "metric"] + tcols,
               [[a, b, metric] + [t[c] for c in tcols] for (a, b, metric), t in report.pairwise_tests.items()])

    paths.append(os.path.join(out_dir, "summary.txt"))
    with open(paths[-1], "w", encoding="utf-8", newline="\n") as fh:
        fh.write(render_summary(report))
    return paths


def render_summary(report: EvaluationReport) -> str:
    out = ["Ranging evaluation summary", "=" * 26, ""]
    if report.fingerprint:
        out.append(f"config fingerprint: {report.fingerprint}")
    out.append("path loss R2 is computed about the held-out (test) mean")
    out.append("")
    out.append(f"{'variant':<12}{'RMSE m':>10}{'MAE m':>10}{'MedAE m':>10}{'MRE %':>10}{'PL RMSE dB':>12}{'PL R2':>8}")
    for name, m in report.per_variant.items():
        pl = report.path_loss.get(name)
        out.append(f"{name:<12}{m['rmse_m']:>10.3f}{m['mae_m']:>10.3f}{m['median_ae_m']:>10.3f}"
                   f"{m['mean_rel_err_pct']:>10.2f}"
                   f"{(format(pl.rmse, '.3f') if pl else '-'):>12}{(fmt(pl.r2, '.3f') if pl else '-'):>8}")
    out.append("")
    for name, curve in report.cde_curves.items():
        at12 = next((f for t, f in curve if math.isclose(t, 12.0)), None)
        if at12 is not None:
            out.append(f"CDE {name}: {at12 * 100:.1f}% of estimates within 12 m")
    if report.rssi_dispersion is not None:
        d = report.rssi_dispersion
        out.append("")
        out.append(f"RSSI volatility (per-device demeaned): raw std {d.std_raw:.6f} dB, "
                   f"filtered std {d.std_filt:.6f} dB, ratio {d.std_filt / d.std_raw:.6f}, "
                   f"reduction {fmt(d.reduction_pct, '.4f')}%")
        out.append(f"RSSI skewness: raw {fmt(d.skew_raw, '.4f')}, filtered {fmt(d.skew_filt, '.4f')}")
    if report.pairwise_tests:
        out.append("")
        out.append("Exact Wilcoxon signed-rank tests on device-level summaries (two-sided):")
        for (a, b, metric), t in report.pairwise_tests.items():
            out.append(f"  {a} vs {b} [{metric}]: p={fmt(t['p_value'], '.6g')} "
                       f"(n={t['n']}, {a} better on {t['n_a_better']})")
    if report.latency:
        out.append("")
        out.append("Per-packet latency (filter + path loss + inversion):")
        for k, v in report.latency.items():
            out.append(f"  {k}: {_cell(v)}")
    if report.config_text:
        out.append("")
        out.append("Resolved configuration:")
        out.append(report.config_text.rstrip())
    return "\n".join(out) + "\n"
