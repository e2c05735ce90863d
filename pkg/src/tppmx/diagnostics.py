"""Model-fit and convergence summaries computed from kept draws."""
from __future__ import annotations

import numpy as np
from scipy.special import logsumexp


def _loglik(trace_or_matrix):
    L = getattr(trace_or_matrix, "loglik", trace_or_matrix)
    L = np.asarray(L, dtype=float)
    if L.ndim != 2 or L.shape[1] == 0:
        raise ValueError("need an (n x draws) log-likelihood matrix with at least one draw")
    return L


def log_cpo(trace) -> np.ndarray:
    """log conditional predictive ordinates: harmonic mean of the per-draw
    likelihoods of each unit."""
    L = _loglik(trace)
    S = L.shape[1]
    return np.log(S) - logsumexp(-L, axis=1)


def compute_lpml(trace) -> float:
    return float(log_cpo(trace).sum())


def compute_waic(trace) -> float:
    """WAIC on the deviance scale, -2 (lppd - p_waic), with the variance
    form of the effective number of parameters."""
    L = _loglik(trace)
    S = L.shape[1]
    lppd = (logsumexp(L, axis=1) - np.log(S)).sum()
    p_waic = L.var(axis=1, ddof=1).sum() if S > 1 else 0.0
    return float(-2.0 * (lppd - p_waic))


def compute_psrf(chains) -> np.ndarray:
    """Gelman-Rubin potential scale reduction for each monitored scalar.

    ``chains`` is (m chains x draws) or (m x draws x scalars)."""
    X = np.asarray(chains, dtype=float)
    if X.ndim == 2:
        X = X[:, :, None]
    m, n = X.shape[:2]
    if m < 2:
        raise ValueError("PSRF needs at least two chains")
    if n < 2:
        raise ValueError("PSRF needs at least two draws per chain")
    means = X.mean(axis=1)
    B = n * means.var(axis=0, ddof=1)
    W = X.var(axis=1, ddof=1).mean(axis=0)
    var_plus = (n - 1) / n * W + B / n
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sqrt(var_plus / W)
    # constant scalars carry no information about mixing
    r = np.where(W > 0, r, np.where(B > 0, np.inf, 1.0))
    return r
