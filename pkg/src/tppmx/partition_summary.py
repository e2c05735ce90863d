"""Posterior partition summaries: co-clustering, variation of information,
point estimate and adjusted Rand index."""
from __future__ import annotations

import math

import numba
import numpy as np
from scipy.special import comb


def _contingency(p1, p2):
    p1 = np.asarray(p1)
    p2 = np.asarray(p2)
    if p1.shape != p2.shape:
        raise ValueError("partitions must have the same length")
    _, a = np.unique(p1, return_inverse=True)
    _, b = np.unique(p2, return_inverse=True)
    table = np.zeros((a.max() + 1, b.max() + 1), dtype=np.int64)
    np.add.at(table, (a, b), 1)
    return table


def cooccurrence(partitions) -> np.ndarray:
    """Fraction of draws in which each pair of units shares a cluster.
    ``partitions`` is (draws x n)."""
    L = np.atleast_2d(np.asarray(partitions))
    if L.shape[0] == 0:
        raise ValueError("at least one partition is required")
    n = L.shape[1]
    out = np.zeros((n, n))
    for row in L:
        out += row[:, None] == row[None, :]
    return out / L.shape[0]


def _entropy(counts, n):
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def vi_distance(p1, p2) -> float:
    """Variation of information in nats."""
    table = _contingency(p1, p2)
    n = table.sum()
    h1 = _entropy(table.sum(axis=1), n)
    h2 = _entropy(table.sum(axis=0), n)
    h12 = _entropy(table.ravel(), n)
    return max(0.0, 2.0 * h12 - h1 - h2)


@numba.njit(cache=True)
def _xlogx_sum(counts, n):
    h = 0.0
    for c in counts:
        if c > 0:
            p = c / n
            h -= p * math.log(p)
    return h


@numba.njit(cache=True)
def _mean_vi(uniq, weights, kmax):
    """Weighted mean VI from every unique partition to all of them."""
    U, n = uniq.shape
    out = np.zeros(U)
    H = np.zeros(U)
    for a in range(U):
        H[a] = _xlogx_sum(np.bincount(uniq[a], minlength=kmax), n)
    joint = np.zeros(kmax * kmax, dtype=np.int64)
    for a in range(U):
        for b in range(a + 1, U):
            for i in range(n):
                joint[uniq[a, i] * kmax + uniq[b, i]] += 1
            h = 0.0
            # visit each occupied cell once, clearing it for the next pair
            for i in range(n):
                idx = uniq[a, i] * kmax + uniq[b, i]
                c = joint[idx]
                if c > 0:
                    h -= c / n * math.log(c / n)
                    joint[idx] = 0
            v = 2.0 * h - H[a] - H[b]
            out[a] += weights[b] * v
            out[b] += weights[a] * v
    return out / weights.sum()


def point_estimate_partition(partitions, return_index: bool = False):
    """Visited partition with the smallest mean VI to all draws."""
    L = np.atleast_2d(np.asarray(partitions, dtype=np.int64))
    if L.shape[0] == 0:
        raise ValueError("at least one partition is required")
    L = np.array([np.unique(r, return_inverse=True)[1] for r in L])
    uniq, first, counts = np.unique(L, axis=0, return_index=True, return_counts=True)
    scores = _mean_vi(uniq, counts.astype(np.float64), int(L.max()) + 1)
    # ties go to the earliest visited partition
    best = min(range(len(uniq)), key=lambda i: (round(scores[i], 12), first[i]))
    est = L[first[best]].copy()
    return (est, int(first[best])) if return_index else est


def adjusted_rand_index(p1, p2) -> float:
    table = _contingency(p1, p2)
    n = table.sum()
    sum_ij = comb(table, 2).sum()
    sum_a = comb(table.sum(axis=1), 2).sum()
    sum_b = comb(table.sum(axis=0), 2).sum()
    total = comb(n, 2)
    expected = sum_a * sum_b / total if total else 0.0
    max_idx = 0.5 * (sum_a + sum_b)
    if max_idx == expected:
        return 1.0
    return float((sum_ij - expected) / (max_idx - expected))
