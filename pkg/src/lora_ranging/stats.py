"""Shared summary statistics."""

from __future__ import annotations

import numpy as np
from scipy import stats as _sps


class _Undefined:
    """Marker for a statistic that has no value (e.g. R² on constant truth)."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "undefined"

    __str__ = __repr__

    def __bool__(self):
        return False

    def __reduce__(self):
        return (_Undefined, ())


UNDEFINED = _Undefined()


def is_undefined(value) -> bool:
    return value is UNDEFINED


def skewness(values) -> float:
    """Adjusted Fisher-Pearson sample skewness (G1)."""
    values = np.asarray(values, dtype=float)
    if len(values) < 3:
        return UNDEFINED
    if np.ptp(values) == 0:
        return 0.0
    return float(_sps.skew(values, bias=False))


def fmt(value, spec: str = ".6g") -> str:
    if value is UNDEFINED:
        return "undefined"
    return format(value, spec)
