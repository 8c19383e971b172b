"""Code-usage and inter-codebook dependency statistics."""

from __future__ import annotations

import numpy as np
from scipy import stats


def usage_histogram(codes: np.ndarray, size: int) -> np.ndarray:
    """Per-depth usage frequencies, ``(N, D) -> (D, K)``; rows sum to 1."""
    codes = np.asarray(codes)
    counts = np.stack([np.bincount(codes[:, d], minlength=size) for d in range(codes.shape[1])])
    return counts / counts.sum(axis=1, keepdims=True)


def pair_counts(first: np.ndarray, second: np.ndarray, size: int) -> np.ndarray:
    counts = np.zeros((size, size), dtype=np.int64)
    np.add.at(counts, (np.asarray(first), np.asarray(second)), 1)
    return counts


def conditional_matrix(counts: np.ndarray) -> np.ndarray:
    """Row-normalized ``P(k2 | k1)``; rows for unseen ``k1`` are NaN."""
    counts = np.asarray(counts, dtype=np.float64)
    totals = counts.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(totals > 0, counts / totals, np.nan)


def row_entropy(cond: np.ndarray) -> np.ndarray:
    """Entropy in nats of each conditional row (NaN rows stay NaN)."""
    p = np.asarray(cond, dtype=np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    out = terms.sum(axis=1)
    out[np.isnan(p).any(axis=1)] = np.nan
    return out


def independence_test(counts: np.ndarray) -> dict:
    """Chi-square test of independence between ``k1`` and ``k2`` on observed rows/columns."""
    counts = np.asarray(counts)
    table = counts[counts.sum(1) > 0][:, counts.sum(0) > 0]
    if table.shape[0] < 2 or table.shape[1] < 2:
        return {"chi2": 0.0, "p_value": 1.0, "dof": 0}
    res = stats.chi2_contingency(table, correction=False)
    return {"chi2": float(res.statistic), "p_value": float(res.pvalue), "dof": int(res.dof)}
