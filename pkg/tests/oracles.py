"""Reference implementations used to cross-check the package.

Each oracle takes a different route from the code it checks: exact rational
arithmetic for the filter, normal equations for least squares, brute-force
sign enumeration for the signed-rank test.
"""

from __future__ import annotations

import itertools
from fractions import Fraction

import numpy as np


def kalman_step_exact(x, p, r, z, q="0.003", gamma="0.99", alpha_clip=("0.95", "1.05"),
                      r_clamp=("0.12", "0.38")):
    """One adaptive filter step in exact rationals. Returns (x, p, r, k, alpha)."""
    F = Fraction
    x, p, r, z = F(x), F(p), F(r), F(z)
    q, gamma = F(q), F(gamma)
    a_lo, a_hi = map(F, alpha_clip)
    r_lo, r_hi = map(F, r_clamp)
    p_prior = p + q
    nu = z - x
    alpha = min(max(nu * nu / (p_prior + r), a_lo), a_hi)
    r_new = min(max(gamma * r + (1 - gamma) * alpha * r, r_lo), r_hi)
    k = p_prior / (p_prior + r_new)
    return x + k * nu, (1 - k) * p_prior, r_new, k, alpha


def normal_equations(X, y):
    """Least squares through the Gram matrix, solved by Gaussian elimination."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    G = X.T @ X
    b = X.T @ y
    n = G.shape[0]
    A = np.hstack([G, b[:, None]])
    for i in range(n):
        piv = i + int(np.argmax(np.abs(A[i:, i])))
        A[[i, piv]] = A[[piv, i]]
        A[i] /= A[i, i]
        for j in range(n):
            if j != i:
                A[j] -= A[j, i] * A[i]
    return A[:, -1]


def _average_ranks(values):
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def wilcoxon_enumeration(deltas):
    """Two-sided exact signed-rank p-value by listing all 2**n sign patterns."""
    nz = [float(d) for d in deltas if d != 0]
    n = len(nz)
    ranks = _average_ranks([abs(d) for d in nz])
    observed = sum(r for r, d in zip(ranks, nz) if d > 0)
    lower = upper = 0
    for signs in itertools.product((0, 1), repeat=n):
        w = sum(r for r, s in zip(ranks, signs) if s)
        lower += w <= observed + 1e-9
        upper += w >= observed - 1e-9
    total = 2 ** n
    return min(1.0, 2 * min(lower, upper) / total)


def harmonic_sum(m: int) -> float:
    return float(sum(Fraction(1, i) for i in range(1, m + 1)))


def average_unsuccessful_search(n: int) -> float:
    """c(n) for a binary search tree, from exact harmonic numbers."""
    if n < 2:
        return 0.0
    if n == 2:
        return 1.0
    return 2 * harmonic_sum(n - 1) - 2 * (n - 1) / n
