"""Isolation Forest used to drop anomalous uplinks, one device at a time.

Trees are grown on uniform subsamples of size ``psi`` with uniformly random
(feature, split value) choices, up to depth ``ceil(log2(psi))``. A sample's
score is ``2 ** (-E[h(x)] / c(psi))`` where ``h`` is the path length, leaves
adding ``c(leaf size)`` for the unresolved subtree.

Subsamples are drawn by ranking per-row hash keys instead of by position, so
records keyed by identity get the same forest whatever order they arrive in.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.special import digamma
from sklearn.base import BaseEstimator, OutlierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .dataset import ENV_COLUMNS
from .exceptions import DataError

FEATURE_COLUMNS = ("rssi_dbm", "snr_db") + ENV_COLUMNS
_MASK64 = (1 << 64) - 1
_EXACT_HARMONIC_LIMIT = 1024


def harmonic(m: int) -> float:
    if m < _EXACT_HARMONIC_LIMIT:
        return math.fsum(1.0 / k for k in range(1, m + 1))
    return float(digamma(m + 1.0) + np.euler_gamma)


def c_factor(n: int) -> float:
    """Average unsuccessful-search path length in a BST of ``n`` nodes."""
    if n <= 1:
        return 0.0
    return 2.0 * harmonic(n - 1) - 2.0 * (n - 1) / n


def score_from_path_length(mean_path_length, psi: int):
    return np.power(2.0, -np.asarray(mean_path_length, dtype=float) / c_factor(psi))


def drop_count(n: int, contamination: float) -> int:
    if not 0 <= contamination < 1:
        raise ValueError("contamination must lie in [0, 1)")
    # round first so that e.g. 700 * 0.01 does not ceil to 8
    return math.ceil(round(n * contamination, 9))


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = (x + np.uint64(0x9E3779B97F4A7C15)) & np.uint64(_MASK64)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def stable_hash(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


def record_keys(records: pd.DataFrame) -> np.ndarray:
    """Order-independent 64-bit identity per record (device, counter, timestamp)."""
    return pd.util.hash_pandas_object(records[["device_id", "counter", "timestamp"]],
                                      index=False).to_numpy(dtype=np.uint64)


@dataclass
class IsolationTree:
    feature: np.ndarray    # -1 marks a leaf
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    size: np.ndarray       # samples reaching the node during growth
    depth: np.ndarray

    def __post_init__(self):
        self.leaf_c = np.array([c_factor(int(s)) for s in self.size])

    @property
    def max_depth(self) -> int:
        return int(self.depth.max())

    def path_length(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.intp)
        active = self.feature[node] >= 0
        while active.any():
            idx = np.flatnonzero(active)
            nd = node[idx]
            go_left = X[idx, self.feature[nd]] < self.threshold[nd]
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])
            active[idx] = self.feature[node[idx]] >= 0
        return self.depth[node] + self.leaf_c[node]


def grow_tree(X: np.ndarray, height_limit: int, rng: np.random.Generator) -> IsolationTree:
    feature, threshold, left, right, size, depth = [], [], [], [], [], []

    def new_node(n, d):
        for lst, v in ((feature, -1), (threshold, np.nan), (left, -1), (right, -1), (size, n), (depth, d)):
            lst.append(v)
        return len(feature) - 1

    stack = [(new_node(len(X), 0), np.arange(len(X)))]
    while stack:
        node, rows = stack.pop()
        d = depth[node]
        if d >= height_limit or len(rows) <= 1:
            continue
        sub = X[rows]
        lo, hi = sub.min(axis=0), sub.max(axis=0)
        # only features that still vary can split the node
        candidates = np.flatnonzero(hi > lo)
        if len(candidates) == 0:
            continue
        f = int(candidates[rng.integers(len(candidates))])
        v = rng.uniform(lo[f], hi[f])
        while v <= lo[f]:
            v = rng.uniform(lo[f], hi[f])
        mask = sub[:, f] < v
        feature[node], threshold[node] = f, v
        left[node] = new_node(int(mask.sum()), d + 1)
        right[node] = new_node(int((~mask).sum()), d + 1)
        stack.append((right[node], rows[~mask]))
        stack.append((left[node], rows[mask]))
    return IsolationTree(np.array(feature, dtype=np.intp), np.array(threshold, dtype=float),
                         np.array(left, dtype=np.intp), np.array(right, dtype=np.intp),
                         np.array(size, dtype=np.int64), np.array(depth, dtype=float))


class IsolationForest(OutlierMixin, BaseEstimator):
    """Isolation Forest with identity-keyed subsampling.

    ``anomaly_score`` returns scores in (0, 1), higher meaning more
    anomalous; ``score_samples`` is its negation, following the scikit-learn
    convention. ``predict`` flags as -1 every sample scoring at or above the
    ``ceil(N * contamination)``-th highest training score.
    """

    def __init__(self, n_estimators=100, max_samples=256, contamination=0.01, random_state=0):
        self.n_estimators = n_estimators
        self.max_samples = max_samples
        self.contamination = contamination
        self.random_state = random_state

    def fit(self, X, y=None, keys=None):
        X = check_array(X, dtype=float)
        n = len(X)
        if n < 2:
            raise DataError("isolation forest needs at least 2 samples")
        if keys is None:
            keys = np.arange(n, dtype=np.uint64)
        keys = np.asarray(keys, dtype=np.uint64)
        if len(keys) != n:
            raise DataError("keys must align with X")
        seed = int(self.random_state) & _MASK64
        psi = min(int(self.max_samples), n)
        limit = math.ceil(math.log2(psi))
        trees = []
        for t in range(int(self.n_estimators)):
            salt = _splitmix64(np.array([seed ^ t], dtype=np.uint64))[0]
            order = _splitmix64(keys ^ salt)
            rows = np.argpartition(order, psi - 1)[:psi] if psi < n else np.arange(n)
            rows = rows[np.argsort(order[rows], kind="stable")]
            rng = np.random.default_rng([seed, t])
            trees.append(grow_tree(X[rows], limit, rng))
        self.trees_ = trees
        self.subsample_size_ = psi
        self.n_features_in_ = X.shape[1]
        train_scores = self.anomaly_score(X)
        k = drop_count(n, self.contamination)
        self.threshold_ = float(np.sort(train_scores)[::-1][k - 1]) if k > 0 else math.inf
        return self

    def mean_path_length(self, X) -> np.ndarray:
        check_is_fitted(self, "trees_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise DataError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return np.mean([t.path_length(X) for t in self.trees_], axis=0)

    def anomaly_score(self, X) -> np.ndarray:
        return score_from_path_length(self.mean_path_length(X), self.subsample_size_)

    def score_samples(self, X) -> np.ndarray:
        return -self.anomaly_score(X)

    def predict(self, X) -> np.ndarray:
        return np.where(self.anomaly_score(X) >= self.threshold_, -1, 1)


def build_forest(samples, n_trees: int = 100, subsample: int = 256, seed: int = 0, keys=None) -> IsolationForest:
    return IsolationForest(n_estimators=n_trees, max_samples=subsample, random_state=seed).fit(samples, keys=keys)


def anomaly_score(forest: IsolationForest, sample) -> float:
    return float(forest.anomaly_score(np.atleast_2d(np.asarray(sample, dtype=float)))[0])


def device_seed(seed: int, device_id: str) -> int:
    return (int(seed) & _MASK64) ^ stable_hash(device_id)


def filter_device_records(records: pd.DataFrame, contamination: float = 0.01, seed: int = 0,
                          n_trees: int = 100, subsample: int = 256):
    """Drop the ``ceil(N * contamination)`` highest-scoring records of one device.

    Ties are resolved by dropping the earlier timestamp first. Returns
    ``(kept, dropped)``, both in the input's row order.
    """
    devices = records["device_id"].unique()
    if len(devices) > 1:
        raise DataError(f"records span several devices: {sorted(devices)}")
    n = len(records)
    k = drop_count(n, contamination)
    if k == 0 or n == 0:
        return records.reset_index(drop=True), records.iloc[:0].reset_index(drop=True)
    if n < 2:
        return records.iloc[:0].reset_index(drop=True), records.reset_index(drop=True)
    X = records[list(FEATURE_COLUMNS)].to_numpy(dtype=float)
    forest = build_forest(X, n_trees, subsample, device_seed(seed, str(devices[0])), keys=record_keys(records))
    scores = forest.anomaly_score(X)
    ts = records["timestamp"].astype("datetime64[us, UTC]").astype("int64").to_numpy()
    ranked = np.lexsort((ts, -scores))
    drop = np.zeros(n, dtype=bool)
    drop[ranked[:k]] = True
    return records.loc[~drop].reset_index(drop=True), records.loc[drop].reset_index(drop=True)


def filter_all_devices(records: pd.DataFrame, contamination: float = 0.01, seed: int = 0,
                       n_trees: int = 100, subsample: int = 256):
    kept, dropped = [], []
    for _, group in records.groupby("device_id", sort=True):
        k, d = filter_device_records(group, contamination, seed, n_trees, subsample)
        kept.append(k)
        dropped.append(d)
    if not kept:
        return records, records.iloc[:0]
    return pd.concat(kept, ignore_index=True), pd.concat(dropped, ignore_index=True)
