"""Run configuration: INI-style ``key = value`` sections with typed defaults.

Values resolve in order: built-in defaults, then the config file, then
``section.key=value`` overrides from the command line.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass

from .exceptions import ConfigError
from .kalman import FilterParams
from .synth import OutlierModel, SNRModel, SynthConfig, default_coefficients, default_environment

DEFAULTS: dict[str, dict[str, object]] = {
    "paths": {
        "data_dir": "data",
        "geometry": "",          # empty: <data_dir>/geometry.csv
        "model_dir": "models",
        "out_dir": "report",
    },
    "pipeline": {
        "seed": 0,
        "variants": "MWM,MWM-EP,MWM-EP-KF",
        "train_fraction": 0.8,
        "sf_min": 7,
        "sf_max": 10,
        "dedup_window_s": 3600.0,
        "cv_folds": 5,
        "tx_power_dbm": 14.0,
    },
    "anomaly": {
        "n_trees": 100,
        "subsample": 256,
        "contamination": 0.01,
        "seed": -1,              # -1: use pipeline.seed
    },
    "kalman": {
        "q": 0.003,
        "r0": 0.22,
        "gamma": 0.99,
        "alpha_min": 0.95,
        "alpha_max": 1.05,
        "r_min": 0.12,
        "r_max": 0.38,
        "p0": 1.0,
        "gain_uses": "current",
    },
    "synth": {
        "n_packets_per_device": 10_000,
        "shadowing_sigma_db": 4.0,
        "outlier_rate": 0.005,
        "outlier_magnitude_db": -15.0,
        "outlier_burst_length": 5,
        "duplicate_rate": 0.002,
        "high_sf_fraction": 0.02,
        "beta0": 30.0,
        "n": 2.8,
        "omega_brick": 7.0,
        "omega_wood": 1.5,
        "epsilon_temperature_c": -0.102,
        "epsilon_humidity_pct": -0.082,
        "epsilon_co2_ppm": 0.0015,
        "epsilon_pm25_ugm3": 0.04,
        "epsilon_pressure_hpa": -0.005,
        "k_gamma": -0.4,
        "snr_a_db": 10.0,
        "snr_slope": 0.15,
        "snr_l_min_db": 100.0,
        "snr_noise_db": 2.0,
        "start": "2024-01-01T00:00:00Z",
    },
    "bench": {
        "runs": 10,
    },
}

_ENV_NAMES = ("temperature_c", "humidity_pct", "co2_ppm", "pm25_ugm3", "pressure_hpa")


def _coerce(section: str, key: str, raw: str):
    default = DEFAULTS[section][key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


@dataclass
class RunConfig:
    values: dict[str, dict[str, object]]

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        values = {s: dict(kv) for s, kv in DEFAULTS.items()}
        if path:
            parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
            try:
                with open(path, encoding="utf-8") as fh:
                    parser.read_file(fh)
            except (OSError, configparser.Error) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            for section in parser.sections():
                for key, raw in parser.items(section):
                    cls._set(values, section, key, raw)
        for item in overrides:
            dotted, sep, raw = item.partition("=")
            section, dot, key = dotted.strip().partition(".")
            if not sep or not dot:
                raise ConfigError(f"override must look like section.key=value, got {item!r}")
            cls._set(values, section, key, raw)
        cfg = cls(values)
        cfg.filter_params()  # validate early
        return cfg

    @staticmethod
    def _set(values, section, key, raw):
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in DEFAULTS[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        values[section][key] = _coerce(section, key, raw)

    def __getitem__(self, dotted: str):
        section, _, key = dotted.partition(".")
        return self.values[section][key]

    def set(self, dotted: str, value) -> None:
        section, _, key = dotted.partition(".")
        self._set(self.values, section, key, str(value))

    def to_text(self) -> str:
        out = io.StringIO()
        for section, kv in self.values.items():
            out.write(f"[{section}]\n")
            for key, v in kv.items():
                if isinstance(v, bool):
                    v = str(v).lower()
                elif isinstance(v, float):
                    v = repr(v)
                out.write(f"{key} = {v}\n")
            out.write("\n")
        return out.getvalue()

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]

    # -- typed views --------------------------------------------------------

    def filter_params(self) -> FilterParams:
        k = self.values["kalman"]
        try:
            return FilterParams(q=k["q"], r0=k["r0"], gamma=k["gamma"],
                                alpha_clip=(k["alpha_min"], k["alpha_max"]),
                                r_clamp=(k["r_min"], k["r_max"]), p0=k["p0"], gain_uses=k["gain_uses"])
        except ValueError as exc:
            raise ConfigError(f"[kalman] {exc}") from exc

    @property
    def anomaly_seed(self) -> int:
        s = self["anomaly.seed"]
        return self["pipeline.seed"] if s < 0 else s

    @property
    def variants(self) -> list[str]:
        return [v.strip() for v in str(self["pipeline.variants"]).split(",") if v.strip()]

    def synth_config(self, geometry) -> SynthConfig:
        s = self.values["synth"]
        coeffs = default_coefficients()
        coeffs.beta0, coeffs.n = s["beta0"], s["n"]
        coeffs.omega = (s["omega_brick"], s["omega_wood"])
        coeffs.epsilon = tuple(s[f"epsilon_{c}"] for c in _ENV_NAMES)
        coeffs.k_gamma = s["k_gamma"]
        try:
            return SynthConfig(
                coefficients=coeffs, geometry=geometry,
                n_packets_per_device=s["n_packets_per_device"],
                shadowing_sigma_db=s["shadowing_sigma_db"],
                outlier=OutlierModel(s["outlier_rate"], s["outlier_magnitude_db"], s["outlier_burst_length"]),
                env_dynamics=default_environment(),
                snr_model=SNRModel(s["snr_a_db"], s["snr_slope"], s["snr_l_min_db"], s["snr_noise_db"]),
                tx_power_dbm=self["pipeline.tx_power_dbm"], seed=self["pipeline.seed"], start=s["start"],
                high_sf_fraction=s["high_sf_fraction"], duplicate_rate=s["duplicate_rate"],
            )
        except ValueError as exc:
            raise ConfigError(f"[synth] {exc}") from exc
