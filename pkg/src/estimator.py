"""The expected-sparsity estimator, its evaluation metrics and normality checks."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy import stats

from models import InputError, NormalityReport, PosteriorP, SparsityEstimate

SHAPIRO_MIN_N = 3
SHAPIRO_MAX_N = 5000
DAGOSTINO_MIN_N = 8


def estimate_expected_sparsity(p: PosteriorP, source: str = "") -> SparsityEstimate:
    """E(s) estimate: the compensated sum of the posterior means E(p_i | o)."""
    values = np.asarray(p.p_mean, dtype=np.float64).ravel()
    if values.size == 0:
        raise InputError("Posterior has no pixels")
    return SparsityEstimate(value=math.fsum(values), n_pixels=values.size, source=source)


def abs_diff_percent(a: float, b: float, n: int) -> float:
    if n <= 0:
        raise InputError(f"Pixel count must be positive, got {n}")
    return abs(a - b) * 100.0 / n


def sample_mean_sparsity(s_list: Sequence[int]) -> float:
    if len(s_list) == 0:
        raise InputError("Cannot average an empty list of sparsities")
    return math.fsum(float(s) for s in s_list) / len(s_list)


def ensemble_variance_identity(p_fields: np.ndarray) -> tuple[float, float]:
    """Variance of the row sums against the sum of the column covariance matrix.

    The right-hand side is built as sum_i Var_i + 2 sum_{i<j} Cov_ij from
    centred columns, without forming the N x N matrix.
    """
    fields = np.asarray(p_fields, dtype=np.float64)
    if fields.ndim == 1:
        fields = fields[:, None]
    r = fields.shape[0]
    if r < 2:
        raise InputError(f"Need at least 2 replicates, got {r}")

    lhs = float(np.var(fields.sum(axis=1), ddof=1))

    centred = fields - fields.mean(axis=0)
    diag = float(np.sum(centred * centred)) / (r - 1)
    row_sums = centred.sum(axis=1)
    # sum over all (i, j) of C_i C_j minus the diagonal terms
    off_diag = (float(row_sums @ row_sums) - diag * (r - 1)) / (r - 1)
    return lhs, diag + off_diag


# ── Normality ────────────────────────────────────────────────────────

def standardize(x: Sequence[float]) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.size < 2:
        raise InputError(f"Need at least 2 values to standardize, got {arr.size}")
    sd = float(np.std(arr, ddof=1))
    if sd == 0:
        raise InputError("Cannot standardize a sample with zero variance")
    return (arr - arr.mean()) / sd


def shapiro_wilk(x: Sequence[float]) -> NormalityReport:
    """W statistic and p-value (Royston's approximation, via scipy)."""
    arr = np.asarray(x, dtype=np.float64)
    if not SHAPIRO_MIN_N <= arr.size <= SHAPIRO_MAX_N:
        raise InputError(f"Shapiro-Wilk needs {SHAPIRO_MIN_N} <= n <= {SHAPIRO_MAX_N}, got {arr.size}")
    if np.all(arr == arr[0]):
        raise InputError("Shapiro-Wilk is undefined for a constant sample")
    w, p = stats.shapiro(arr)
    return NormalityReport(
        statistic=float(w), p_value=float(p), n=arr.size, standardized=standardize(arr)
    )


def dagostino_k2(x: Sequence[float]) -> NormalityReport:
    arr = np.asarray(x, dtype=np.float64)
    if arr.size < DAGOSTINO_MIN_N:
        raise InputError(f"D'Agostino K^2 needs n >= {DAGOSTINO_MIN_N}, got {arr.size}")
    if np.all(arr == arr[0]):
        raise InputError("D'Agostino K^2 is undefined for a constant sample")
    k2, p = stats.normaltest(arr)
    return NormalityReport(
        statistic=float(k2), p_value=float(p), n=arr.size,
        standardized=standardize(arr), test="dagostino-k2",
    )


NORMALITY_TESTS = {
    "shapiro-wilk": shapiro_wilk,
    "dagostino-k2": dagostino_k2,
}


def normality_test(x: Sequence[float], test: str = "shapiro-wilk") -> NormalityReport:
    try:
        fn = NORMALITY_TESTS[test]
    except KeyError:
        raise InputError(f"Unknown normality test {test!r}; choose from {sorted(NORMALITY_TESTS)}")
    return fn(x)


def qq_points(x: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """(theoretical normal quantiles, sorted sample) at Blom positions."""
    arr = np.sort(np.asarray(x, dtype=np.float64))
    n = arr.size
    if n == 0:
        raise InputError("Cannot build QQ points for an empty sample")
    positions = (np.arange(1, n + 1) - 0.375) / (n + 0.25)
    return stats.norm.ppf(positions), arr
