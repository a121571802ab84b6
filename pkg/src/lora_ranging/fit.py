"""Least-squares calibration of the multi-wall path loss variants.

The solver factorizes the design matrix (Householder QR) and back-substitutes;
the normal equations are never formed. Coefficients keep physical units:
environmental covariates enter unstandardized.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.linalg import solve_triangular
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .dataset import LinkGeometry, kfold_chronological, sort_chronologically
from .exceptions import DataError, NumericError
from .features import (
    DEFAULT_TX_POWER_DBM, ENV_FEATURES, ModelTag, ModelVariant, build_design_matrix,
    column_order_string,
)
from .stats import UNDEFINED, skewness

log = logging.getLogger(__name__)

RANK_THRESHOLD = 1e10
CONDITION_WARNING = 1e8
SCHEMA = "mwm-ep/1"


class IllConditionedWarning(UserWarning):
    pass


@dataclass(frozen=True)
class RegressionMetrics:
    rmse: float
    r2: float
    skewness: float


def ols_fit(X, y, column_names=None):
    """Minimize ``||y - X b||`` by QR. Returns ``(coeffs, residuals)``.

    Rank deficiency is judged on the column-equilibrated factor so that the
    check does not depend on the physical units of each column: a
    singular-value ratio above 1e10 raises :class:`NumericError` naming the
    column that dominates the near-null direction.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    if n <= p:
        raise DataError(f"need more rows than columns, got {n}x{p}")
    q, r = np.linalg.qr(X, mode="reduced")
    scale = np.linalg.norm(r, axis=0)
    if np.any(scale == 0):
        j = int(np.flatnonzero(scale == 0)[0])
        raise NumericError(f"rank-deficient design: column {_name(column_names, j)} is all zeros")
    _, sv, vt = np.linalg.svd(r / scale)
    ratio = sv[0] / sv[-1] if sv[-1] > 0 else math.inf
    if ratio > RANK_THRESHOLD:
        j = int(np.argmax(np.abs(vt[-1])))
        raise NumericError(
            f"rank-deficient design (singular-value ratio {ratio:.3g}); "
            f"column {_name(column_names, j)} is numerically dependent on the others"
        )
    if ratio > CONDITION_WARNING:
        warnings.warn(f"design condition number {ratio:.3g} exceeds {CONDITION_WARNING:.0e}",
                      IllConditionedWarning, stacklevel=2)
    coeffs = solve_triangular(r, q.T @ y, lower=False)
    return coeffs, y - X @ coeffs


def _name(names, j):
    return repr(names[j]) if names is not None else str(j)


def regression_metrics(truth=None, predictions=None, residuals=None) -> RegressionMetrics:
    """RMSE, R² and residual skewness.

    Pass ``truth`` and ``predictions``, or ``residuals`` alone (R² is then
    undefined). R² on constant truth is :data:`UNDEFINED`.
    """
    if residuals is None:
        truth = np.asarray(truth, dtype=float)
        predictions = np.asarray(predictions, dtype=float)
        if truth.shape != predictions.shape:
            raise DataError("truth and predictions differ in length")
        residuals = truth - predictions
    residuals = np.asarray(residuals, dtype=float)
    if residuals.size == 0:
        raise DataError("empty input")
    rmse = float(np.sqrt(np.mean(residuals ** 2)))
    r2 = UNDEFINED
    if truth is not None:
        ss_tot = float(np.sum((truth - truth.mean()) ** 2))
        if ss_tot > 0:
            r2 = 1.0 - float(np.sum(residuals ** 2)) / ss_tot
    return RegressionMetrics(rmse, r2, skewness(residuals))


class PathLossRegressor(RegressorMixin, BaseEstimator):
    """OLS regressor on a design matrix whose first column is the intercept."""

    def __init__(self, column_names=None):
        self.column_names = column_names

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float)
        self.coef_, self.residuals_ = ols_fit(X, y, self.column_names)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise DataError(f"expected {self.n_features_in_} columns, got {X.shape[1]}")
        return X @ self.coef_


@dataclass
class ModelCoefficients:
    variant: ModelVariant
    beta0: float
    n: float
    omega: tuple[float, float]
    epsilon: tuple[float, float, float, float, float] = (0.0, 0.0, 0.0, 0.0, 0.0)
    k_gamma: float = 0.0
    sigma_psi: float = 0.0
    tx_power_dbm: float = DEFAULT_TX_POWER_DBM
    diagnostics: dict = field(default_factory=dict)

    @classmethod
    def from_vector(cls, variant: ModelVariant, coeffs, **kw) -> "ModelCoefficients":
        c = [float(v) for v in coeffs]
        if len(c) != len(variant.columns):
            raise DataError(f"{variant.name} needs {len(variant.columns)} coefficients, got {len(c)}")
        env = tuple(c[4:9]) if variant.tag is ModelTag.MWM_EP else (0.0,) * 5
        k_gamma = c[9] if variant.tag is ModelTag.MWM_EP else 0.0
        return cls(variant, c[0], c[1], (c[2], c[3]), env, k_gamma, **kw)

    def vector(self) -> np.ndarray:
        v = [self.beta0, self.n, *self.omega]
        if self.variant.tag is ModelTag.MWM_EP:
            v += [*self.epsilon, self.k_gamma]
        return np.array(v)

    def check_physical(self) -> None:
        if not (math.isfinite(self.n) and self.n > 0):
            raise NumericError(f"non-physical path loss exponent n={self.n:.6g} for {self.variant.name}")

    def predict_target(self, X) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.vector()


def fit_model(train: pd.DataFrame, geometry: dict[str, LinkGeometry], variant: ModelVariant,
              tx_power_dbm: float = DEFAULT_TX_POWER_DBM, cv_folds: int = 5) -> ModelCoefficients:
    """Calibrate ``variant`` on ``train`` and run chronological k-fold CV.

    For a filtered-RSSI variant the records must already carry the filtered
    column (see :func:`lora_ranging.kalman.filter_frame`).
    """
    if len(train) == 0:
        raise DataError("empty training set")
    X, y = build_design_matrix(train, geometry, variant, tx_power_dbm)
    reg = PathLossRegressor(column_names=list(variant.columns)).fit(X, y)
    coeffs = ModelCoefficients.from_vector(variant, reg.coef_, tx_power_dbm=tx_power_dbm)
    coeffs.check_physical()
    res = reg.residuals_
    coeffs.sigma_psi = float(np.std(res, ddof=1)) if len(res) > 1 else 0.0
    m = regression_metrics(y, y - res)
    diag = {"n_train": len(train), "train_rmse_db": m.rmse, "train_r2": m.r2,
            "train_residual_skewness": m.skewness}
    if cv_folds:
        diag.update(cross_validate(train, geometry, variant, tx_power_dbm, cv_folds))
    coeffs.diagnostics = diag
    log.info("%s fitted on %d packets: n=%.4f rmse=%.3f dB", variant.name, len(train), coeffs.n, m.rmse)
    return coeffs


def cross_validate(train, geometry, variant, tx_power_dbm=DEFAULT_TX_POWER_DBM, k=5) -> dict:
    ordered = sort_chronologically(train)
    rmses, r2s = [], []
    for fold_train, fold_val in kfold_chronological(ordered, k):
        X, y = build_design_matrix(fold_train, geometry, variant, tx_power_dbm)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", IllConditionedWarning)
            b, _ = ols_fit(X, y, list(variant.columns))
        Xv, yv = build_design_matrix(fold_val, geometry, variant, tx_power_dbm)
        m = regression_metrics(yv, Xv @ b)
        rmses.append(m.rmse)
        if m.r2 is not UNDEFINED:
            r2s.append(m.r2)
    return {
        "cv_folds": k,
        "cv_rmse_db_mean": float(np.mean(rmses)),
        "cv_rmse_db_std": float(np.std(rmses, ddof=1)),
        "cv_r2_mean": float(np.mean(r2s)) if r2s else UNDEFINED,
    }


def evaluate_fit(coeffs: ModelCoefficients, records, geometry) -> RegressionMetrics:
    """Held-out path loss metrics (R² about the held-out mean)."""
    X, y = build_design_matrix(records, geometry, coeffs.variant, coeffs.tx_power_dbm)
    return regression_metrics(y, coeffs.predict_target(X))


# -- serialization ---------------------------------------------------------

def _fmt(v) -> str:
    if v is UNDEFINED:
        return "undefined"
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        s = format(float(v), ".17g")
        # keep floats distinguishable from ints on reload
        return s if any(ch in s for ch in ".en") else s + ".0"
    return str(v)


def _parse(v: str):
    if v == "undefined":
        return UNDEFINED
    if v in ("true", "false"):
        return v == "true"
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        return v


_ENV_KEYS = tuple(f"epsilon_{c}" for c in ENV_FEATURES[:5])


def dumps_model(c: ModelCoefficients) -> str:
    lines = [f"schema={SCHEMA}", f"columns={column_order_string(c.variant)}",
             f"variant={c.variant.name}", f"tx_power_dbm={_fmt(float(c.tx_power_dbm))}",
             f"beta0={_fmt(c.beta0)}", f"n={_fmt(c.n)}",
             f"omega_brick={_fmt(c.omega[0])}", f"omega_wood={_fmt(c.omega[1])}"]
    lines += [f"{k}={_fmt(v)}" for k, v in zip(_ENV_KEYS, c.epsilon)]
    lines += [f"k_gamma={_fmt(c.k_gamma)}", f"sigma_psi={_fmt(c.sigma_psi)}", "[diagnostics]"]
    lines += [f"{k}={_fmt(v)}" for k, v in c.diagnostics.items()]
    return "\n".join(lines) + "\n"


def loads_model(text: str) -> ModelCoefficients:
    head, diag = {}, {}
    section = head
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line == "[diagnostics]":
            section = diag
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DataError(f"malformed model line: {line!r}")
        section[key] = value
    if head.get("schema") != SCHEMA:
        raise DataError(f"unsupported model schema {head.get('schema')!r}, expected {SCHEMA}")
    variant = ModelVariant.from_name(head["variant"])
    if head.get("columns") != column_order_string(variant):
        raise DataError(f"column order mismatch: file has {head.get('columns')!r}, "
                        f"expected {column_order_string(variant)!r}")
    c = ModelCoefficients(
        variant=variant, beta0=float(head["beta0"]), n=float(head["n"]),
        omega=(float(head["omega_brick"]), float(head["omega_wood"])),
        epsilon=tuple(float(head[k]) for k in _ENV_KEYS),
        k_gamma=float(head["k_gamma"]), sigma_psi=float(head["sigma_psi"]),
        tx_power_dbm=float(head["tx_power_dbm"]),
        diagnostics={k: _parse(v) for k, v in diag.items()},
    )
    c.check_physical()
    return c


def save_model(c: ModelCoefficients, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_model(c))


def load_model(path) -> ModelCoefficients:
    with open(path, encoding="utf-8") as fh:
        return loads_model(fh.read())
