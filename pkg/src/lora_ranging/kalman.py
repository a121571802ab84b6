"""Forward-only scalar Kalman filter for RSSI streams.

The state is a random walk observed directly. The measurement covariance
``R`` adapts online from the normalized innovation: each step computes
``alpha = nu**2 / (P_prior + R_prev)``, clips it, and blends
``R = gamma * R_prev + (1 - gamma) * alpha * R_prev`` before clamping.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin

from .dataset import FILTERED_RSSI

GAIN_TIMINGS = ("current", "previous")


@dataclass(frozen=True)
class FilterParams:
    q: float = 0.003
    r0: float = 0.22
    gamma: float = 0.99
    alpha_clip: tuple[float, float] = (0.95, 1.05)
    r_clamp: tuple[float, float] = (0.12, 0.38)
    p0: float = 1.0
    # "current": the gain uses the freshly adapted R_k; "previous": R_{k-1}
    gain_uses: str = "current"

    def __post_init__(self):
        a_lo, a_hi = self.alpha_clip
        r_lo, r_hi = self.r_clamp
        if not self.q > 0:
            raise ValueError("q must be > 0")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if not (0 < a_lo <= a_hi):
            raise ValueError(f"alpha_clip must be a non-empty positive interval, got {self.alpha_clip}")
        if not (0 < r_lo <= r_hi):
            raise ValueError(f"r_clamp must be a non-empty positive interval, got {self.r_clamp}")
        if not r_lo <= self.r0 <= r_hi:
            raise ValueError(f"r0={self.r0} outside r_clamp {self.r_clamp}")
        if not self.p0 > 0:
            raise ValueError("p0 must be > 0")
        if self.gain_uses not in GAIN_TIMINGS:
            raise ValueError(f"gain_uses must be one of {GAIN_TIMINGS}")


@dataclass(frozen=True)
class FilterState:
    x: float
    p: float
    r: float
    k_last: float = float("nan")
    steps: int = 0
    dropped: int = 0


def init_filter(z0: float, params: FilterParams = FilterParams()) -> FilterState:
    if not math.isfinite(z0):
        raise ValueError("cannot initialise the filter from a non-finite measurement")
    return FilterState(x=float(z0), p=params.p0, r=params.r0)


def step(state: FilterState, z: float, params: FilterParams = FilterParams()) -> tuple[FilterState, float]:
    """Consume one measurement; returns the new state and the posterior estimate.

    A non-finite ``z`` leaves the estimate untouched and bumps ``dropped``.
    """
    if not math.isfinite(z):
        return replace(state, dropped=state.dropped + 1), state.x
    a_lo, a_hi = params.alpha_clip
    r_lo, r_hi = params.r_clamp

    x_prior = state.x
    p_prior = state.p + params.q
    nu = z - x_prior
    alpha = min(max(nu * nu / (p_prior + state.r), a_lo), a_hi)
    r_new = params.gamma * state.r + (1.0 - params.gamma) * alpha * state.r
    r_new = min(max(r_new, r_lo), r_hi)
    r_gain = r_new if params.gain_uses == "current" else state.r
    k = p_prior / (p_prior + r_gain)
    x = x_prior + k * nu
    p = (1.0 - k) * p_prior
    return FilterState(x=x, p=p, r=r_new, k_last=k, steps=state.steps + 1, dropped=state.dropped), x


@dataclass
class FilterTrace:
    estimates: np.ndarray
    gains: np.ndarray
    r: np.ndarray
    p: np.ndarray
    alpha: np.ndarray
    dropped: int


def filter_series(z, params: FilterParams = FilterParams(), trace: bool = False):
    """Filter one device's RSSI sequence (timestamp order).

    ``output[i]`` is the posterior after consuming ``z[0..i]``; the first
    measurement initialises the state. Leading non-finite values have no
    estimate to carry forward and come out as NaN. With ``trace=True`` a
    :class:`FilterTrace` holding per-step gain, R, P and clipped alpha is
    returned instead of the bare estimates.
    """
    z = np.asarray(z, dtype=float)
    n = len(z)
    out = np.full(n, np.nan)
    gains = np.full(n, np.nan)
    rs = np.full(n, np.nan)
    ps = np.full(n, np.nan)
    alphas = np.full(n, np.nan)
    q, gamma = params.q, params.gamma
    a_lo, a_hi = params.alpha_clip
    r_lo, r_hi = params.r_clamp
    use_current = params.gain_uses == "current"

    # inlined copy of step(); keep the two in sync
    x = p = r = None
    dropped = 0
    for i, zi in enumerate(z.tolist()):
        if not math.isfinite(zi):
            dropped += 1
            if x is not None:
                out[i] = x
            continue
        if x is None:
            x, p, r = zi, params.p0, params.r0
            out[i], rs[i], ps[i] = x, r, p
            continue
        p_prior = p + q
        nu = zi - x
        alpha = nu * nu / (p_prior + r)
        alpha = a_lo if alpha < a_lo else (a_hi if alpha > a_hi else alpha)
        r_new = gamma * r + (1.0 - gamma) * alpha * r
        r_new = r_lo if r_new < r_lo else (r_hi if r_new > r_hi else r_new)
        k = p_prior / (p_prior + (r_new if use_current else r))
        x = x + k * nu
        p = (1.0 - k) * p_prior
        r = r_new
        out[i], gains[i], rs[i], ps[i], alphas[i] = x, k, r, p, alpha
    if trace:
        return FilterTrace(out, gains, rs, ps, alphas, dropped)
    return out


def steady_state_covariance(q: float, r: float) -> float:
    """Positive root of P**2 + P*q - q*r = 0 (posterior covariance at fixed R)."""
    return (-q + math.sqrt(q * q + 4.0 * q * r)) / 2.0


class KalmanRSSIFilter(TransformerMixin, BaseEstimator):
    """Scikit-learn transformer wrapping :func:`filter_series`.

    ``transform`` accepts a 1-D RSSI array (one stream) or an uplink frame, in
    which case every device is filtered independently in timestamp order and
    the filtered values are returned aligned with the input rows.
    """

    def __init__(self, q=0.003, r0=0.22, gamma=0.99, alpha_min=0.95, alpha_max=1.05,
                 r_min=0.12, r_max=0.38, p0=1.0, gain_uses="current"):
        self.q = q
        self.r0 = r0
        self.gamma = gamma
        self.alpha_min = alpha_min
        self.alpha_max = alpha_max
        self.r_min = r_min
        self.r_max = r_max
        self.p0 = p0
        self.gain_uses = gain_uses

    @classmethod
    def from_params(cls, params: FilterParams) -> "KalmanRSSIFilter":
        d = asdict(params)
        (a_lo, a_hi), (r_lo, r_hi) = d.pop("alpha_clip"), d.pop("r_clamp")
        return cls(alpha_min=a_lo, alpha_max=a_hi, r_min=r_lo, r_max=r_hi, **d)

    @property
    def params(self) -> FilterParams:
        return FilterParams(q=self.q, r0=self.r0, gamma=self.gamma,
                            alpha_clip=(self.alpha_min, self.alpha_max),
                            r_clamp=(self.r_min, self.r_max), p0=self.p0,
                            gain_uses=self.gain_uses)

    def fit(self, X=None, y=None):
        self.params_ = self.params
        return self

    def transform(self, X):
        params = getattr(self, "params_", None) or self.params
        if isinstance(X, pd.DataFrame):
            return filter_frame(X, params)[FILTERED_RSSI].to_numpy()
        return filter_series(np.ravel(X), params)


def filter_frame(records: pd.DataFrame, params: FilterParams = FilterParams(),
                 column: str = "rssi_dbm", out_column: str = FILTERED_RSSI) -> pd.DataFrame:
    """Return a copy of ``records`` with a per-device filtered RSSI column."""
    out = records.copy()
    filtered = np.empty(len(out))
    for _, idx in out.groupby("device_id", sort=True).indices.items():
        order = idx[np.argsort(out["timestamp"].to_numpy()[idx], kind="stable")]
        filtered[order] = filter_series(out[column].to_numpy()[order], params)
    out[out_column] = filtered
    return out
