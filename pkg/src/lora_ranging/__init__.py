"""Environment-aware single-gateway LoRaWAN ranging.

Adaptive Kalman prefiltering of RSSI, multi-wall path loss calibration with
environmental covariates, closed-form distance inversion and evaluation.
"""

from .anomaly import IsolationForest, filter_device_records
from .dataset import LinkGeometry, UplinkRecord, load_geometry, parse_uplink_csv, sample_geometry
from .features import MWM, MWM_EP, MWM_EP_KF, ModelVariant
from .fit import ModelCoefficients, PathLossRegressor, fit_model, load_model, save_model
from .kalman import FilterParams, FilterState, KalmanRSSIFilter, filter_series
from .ranging import DistanceEstimator, StreamingRanger, estimate_stream, invert_distance
from .synth import SynthConfig, generate_campaign

__version__ = "0.1.0"

__all__ = [
    "IsolationForest", "filter_device_records", "LinkGeometry", "UplinkRecord", "load_geometry",
    "parse_uplink_csv", "sample_geometry", "MWM", "MWM_EP", "MWM_EP_KF", "ModelVariant",
    "ModelCoefficients", "PathLossRegressor", "fit_model", "load_model", "save_model",
    "FilterParams", "FilterState", "KalmanRSSIFilter", "filter_series", "DistanceEstimator",
    "StreamingRanger", "estimate_stream", "invert_distance", "SynthConfig", "generate_campaign",
]
