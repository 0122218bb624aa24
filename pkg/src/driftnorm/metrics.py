"""Evaluation statistics: Dice overlap, scan-rescan RMS CV, correlation,
signed relative difference, paired t-test, and the shared OLS fit.

All moment accumulation is two-pass (mean-subtracted) in double precision to
avoid cancellation on large-intensity inputs.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """Dice overlap 2|A∩B| / (|A|+|B|) of two boolean masks on the same grid.

    Both masks empty counts as perfect agreement (1.0).
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"mask grids differ: {a.shape} vs {b.shape}")
    a = a.astype(bool)
    b = b.astype(bool)
    sa = int(a.sum())
    sb = int(b.sum())
    if sa + sb == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / (sa + sb)


def rms_cv(pairs) -> float:
    """Root mean square of per-pair coefficients of variation.

    Each pair (a, b) contributes CV = std/mean with the n=2 sample std
    |a-b|/sqrt(2) and mean (a+b)/2; the result is sqrt(mean(CV^2)).
    """
    arr = np.asarray(pairs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] == 0:
        raise ValueError("pairs must be a non-empty (n, 2) array")
    means = arr.mean(axis=1)
    if (means <= 0).any():
        raise ValueError("all pair means must be positive")
    cv = np.abs(arr[:, 0] - arr[:, 1]) / math.sqrt(2.0) / means
    return float(np.sqrt(np.mean(cv**2)))


def pearson_r(xs, ys) -> float:
    """Product-moment correlation coefficient."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("inputs must be equal-length 1D sequences")
    if len(x) < 3:
        raise ValueError("need at least 3 points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise ValueError("correlation undefined for constant input")
    return float(dx @ dy) / math.sqrt(sxx * syy)


def mean_signed_relative_diff(test, ref) -> float:
    """Mean of (test_i - ref_i) / ref_i; ref values must be positive."""
    t = np.asarray(test, dtype=np.float64)
    r = np.asarray(ref, dtype=np.float64)
    if t.shape != r.shape:
        raise ValueError("length mismatch")
    if (r <= 0).any():
        raise ValueError("reference values must be positive")
    return float(np.mean((t - r) / r))


def student_t_sf(t: float, dof: int) -> float:
    """Upper tail P(T > t) of Student's t via the regularized incomplete beta."""
    if dof < 1:
        raise ValueError("dof must be >= 1")
    if t == 0.0:
        return 0.5
    x = dof / (dof + t * t)
    p = 0.5 * special.betainc(dof / 2.0, 0.5, x)
    return p if t > 0 else 1.0 - p


def paired_t_test(a, b) -> tuple[float, float]:
    """Two-sided paired t-test; returns (t, p).

    Identical inputs give (0, 1); zero-variance nonzero differences are
    degenerate and reported as p = 0 with infinite t.
    """
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("inputs must be equal-length 1D sequences")
    n = len(x)
    if n < 2:
        raise ValueError("need at least 2 pairs")
    d = x - y
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        if mean == 0.0:
            return 0.0, 1.0
        return math.copysign(math.inf, mean), 0.0
    t = mean / (sd / math.sqrt(n))
    p = 2.0 * student_t_sf(abs(t), n - 1)
    return float(t), float(min(p, 1.0))


def ols_fit(xs, ys) -> tuple[float, float]:
    """Closed-form least squares line fit; returns (slope, intercept)."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("need equal-length 1D sequences with >= 2 points")
    mx = x.mean()
    my = y.mean()
    dx = x - mx
    sxx = float(dx @ dx)
    if sxx == 0.0:
        raise ValueError("slope undefined for constant x")
    slope = float(dx @ (y - my)) / sxx
    return slope, my - slope * mx
