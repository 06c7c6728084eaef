"""Rank-based tests, OLS line fits and Bonferroni adjustment.

Ranks and test statistics are computed here; only the t and chi-square
tail probabilities come from :mod:`scipy.stats`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats as _dist


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    n: int
    degenerate: bool = False


@dataclass(frozen=True)
class LinearFit:
    slope: float
    intercept: float
    r_squared: float

    def predict(self, x):
        return self.slope * np.asarray(x, dtype=float) + self.intercept


def average_ranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks with ties given the mean of the ranks they span."""
    a = np.asarray(values, dtype=float)
    order = np.argsort(a, kind="mergesort")
    ranks = np.empty(len(a), dtype=float)
    sorted_a = a[order]
    i = 0
    while i < len(a):
        j = i
        while j + 1 < len(a) and sorted_a[j + 1] == sorted_a[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _tie_sizes(values: np.ndarray) -> np.ndarray:
    _, counts = np.unique(values, return_counts=True)
    return counts


def spearman(x: Sequence[float], y: Sequence[float]) -> TestResult:
    """Spearman's rho with a two-sided p-value from the t approximation.

    A constant series makes rho undefined; the result is then flagged
    ``degenerate`` with NaN statistic and p-value.
    """
    if len(x) != len(y):
        raise ValueError("x and y must have the same length")
    n = len(x)
    if n < 3:
        raise ValueError("spearman needs at least 3 observations")
    rx, ry = average_ranks(x), average_ranks(y)
    dx, dy = rx - rx.mean(), ry - ry.mean()
    denom = math.sqrt(float(dx @ dx) * float(dy @ dy))
    if denom == 0.0:
        return TestResult(math.nan, math.nan, n, degenerate=True)
    rho = max(-1.0, min(1.0, float(dx @ dy) / denom))
    if abs(rho) == 1.0:
        return TestResult(rho, 0.0, n)
    t = rho * math.sqrt((n - 2) / ((1.0 - rho) * (1.0 + rho)))
    p = 2.0 * _dist.t.sf(abs(t), n - 2)
    return TestResult(rho, float(min(1.0, p)), n)


def kruskal_wallis(groups: Sequence[Sequence[float]]) -> TestResult:
    """Kruskal-Wallis H with tie correction; p from chi-square, k-1 dof."""
    if len(groups) < 2:
        raise ValueError("kruskal_wallis needs at least two groups")
    if any(len(g) == 0 for g in groups):
        raise ValueError("every group must be non-empty")
    pooled = np.concatenate([np.asarray(g, dtype=float) for g in groups])
    n = len(pooled)
    ranks = average_ranks(pooled)
    h = 0.0
    start = 0
    for g in groups:
        r = ranks[start:start + len(g)]
        h += r.sum() ** 2 / len(g)
        start += len(g)
    h = 12.0 / (n * (n + 1)) * h - 3.0 * (n + 1)
    ties = _tie_sizes(pooled)
    correction = 1.0 - float(np.sum(ties ** 3 - ties)) / (n ** 3 - n)
    if correction == 0.0:
        return TestResult(0.0, 1.0, n, degenerate=True)
    h = max(0.0, h / correction)
    p = float(_dist.chi2.sf(h, len(groups) - 1))
    return TestResult(h, p, n)


def ols_fit(x: Sequence[float], y: Sequence[float]) -> LinearFit:
    """Least-squares line; R^2 is 1 when y has no variance and the fit is exact."""
    xa = np.asarray(x, dtype=float)
    ya = np.asarray(y, dtype=float)
    if xa.shape != ya.shape:
        raise ValueError("x and y must have the same length")
    if len(xa) < 2:
        raise ValueError("ols_fit needs at least 2 points")
    dx = xa - xa.mean()
    sxx = float(dx @ dx)
    if sxx == 0.0:
        raise ValueError("x is constant")
    slope = float(dx @ (ya - ya.mean())) / sxx
    intercept = float(ya.mean() - slope * xa.mean())
    resid = ya - (slope * xa + intercept)
    ss_res = float(resid @ resid)
    ss_tot = float(((ya - ya.mean()) ** 2).sum())
    if ss_tot == 0.0:
        r2 = 1.0 if ss_res <= 1e-24 else 0.0
    else:
        r2 = min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    return LinearFit(slope, intercept, r2)


def bonferroni(p_values: Sequence[float]) -> list[float]:
    m = len(p_values)
    return [p if math.isnan(p) else min(1.0, m * p) for p in p_values]
