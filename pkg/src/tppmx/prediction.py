"""Posterior-predictive response probabilities for new patients and
utility-based treatment selection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import _kernels
from .core_model import EXPONENT_CAP
from .partition_prior import LogVTable, default_table
from .similarity import NIGParams, SimilarityConfig


@dataclass
class PredictiveDraws:
    """Per arm: (draws x K) response probabilities and the cluster each draw
    joined (-1 for a new cluster)."""

    pi: list
    assigned: list


def similarity_from_dict(d: dict) -> SimilarityConfig:
    d = dict(d)
    nig = d.pop("nig", {})
    return SimilarityConfig(nig=NIGParams(**nig), **d)


def predictive_cluster_weights(x, labels, sigma, log_new, X, similarity: SimilarityConfig,
                               M: int = 5, kinds=None) -> np.ndarray:
    """Normalised weights of the occupied clusters followed by the ``M``
    new-cluster slots. ``x`` and ``X`` are on the similarity (standardised)
    scale; ``log_new`` is the log V ratio for a new cluster (0 to omit it)."""
    labels = np.asarray(labels, dtype=np.int64)
    X = np.ascontiguousarray(X, dtype=float)
    x = np.ascontiguousarray(x, dtype=float)
    C = int(labels.max()) + 1
    kinds, params, scale = similarity.kernel_args(X.shape[1], kinds)
    sizes, xsum, xsq = _kernels.cluster_stats(labels, C, X)
    lw = _kernels.predictive_log_weights(x, sizes, xsum, xsq, C, float(sigma), float(log_new),
                                         int(M), kinds, params, scale)
    return np.exp(lw - logsumexp(lw))


def _new_cluster_log_ratio(trace, arm, table: LogVTable | None):
    """log V(n+1, C+1) - log V(n+1, C) for every kept draw of ``arm``."""
    cfg = trace.meta["config"]
    C = np.asarray(trace.C[arm], dtype=np.int64)
    if not cfg.get("vratio", True):
        return np.zeros(C.size)
    table = table or default_table()
    n1 = int(trace.meta["n"][arm]) + 1
    g = np.asarray(trace.grid_index[arm])
    kap = np.asarray(cfg["grid"]["kappa"])
    sig = np.asarray(cfg["grid"]["sigma"])
    out = np.empty(C.size)
    for gi in np.unique(g):
        col = table.column(n1, kap[gi], sig[gi])
        sel = g == gi
        out[sel] = col[C[sel] + 1] - col[C[sel]]
    return out


def _draw_inputs(trace, arm):
    """Per-draw Cholesky factors of the G0 covariance."""
    Lam = np.asarray(trace.Lam[arm])
    return np.linalg.cholesky(np.linalg.inv(Lam))


def standardize_new(trace, arm, X_new):
    mean = np.asarray(trace.meta["std_mean"][arm])
    sd = np.asarray(trace.meta["std_sd"][arm])
    return (np.asarray(X_new, dtype=float) - mean) / sd


def sample_predictive_response(trace, x_new, z_new, rng, table: LogVTable | None = None,
                               cache: dict | None = None) -> PredictiveDraws:
    """One predictive probability vector per kept draw and arm for a single
    new patient given on the raw covariate scale."""
    cfg = trace.meta["config"]
    sim = similarity_from_dict(cfg["similarity"])
    M = int(cfg["M"])
    cap = float(cfg.get("exponent_cap", EXPONENT_CAP))
    cache = {} if cache is None else cache
    z_new = np.asarray(z_new, dtype=float).reshape(-1)
    counters = np.zeros(1, dtype=np.int64)
    pis, assigned = [], []
    for a in range(trace.T):
        if ("arm", a) not in cache:
            cache[("arm", a)] = (_new_cluster_log_ratio(trace, a, table), _draw_inputs(trace, a))
        log_new, chol = cache[("arm", a)]
        X = np.ascontiguousarray(trace.meta["X"][a], dtype=float)
        kinds, params, scale = sim.kernel_args(X.shape[1], trace.meta["kinds"][a])
        x = np.ascontiguousarray(standardize_new(trace, a, x_new).reshape(-1))
        if z_new.size:
            zb = np.einsum("p,tpk->tk", z_new, trace.beta)
        else:
            zb = np.zeros((trace.n_kept, trace.theta[a].shape[1]))
        eta = np.nan_to_num(trace.eta[a])
        sig = np.asarray(cfg["grid"]["sigma"])[np.asarray(trace.grid_index[a])]
        pi, asg = _kernels.predict_draws(
            x, np.ascontiguousarray(zb), np.asarray(trace.labels[a], dtype=np.int64),
            np.asarray(trace.C[a], dtype=np.int64), eta, np.asarray(trace.theta[a]), chol,
            sig, log_new, X, M, kinds, params, scale, cap, counters, rng)
        pis.append(pi)
        assigned.append(asg)
    return PredictiveDraws(pi=pis, assigned=assigned)


def median_predictive_utility(pi, omega, median_of_utility: bool = False) -> float:
    """Utility of the per-category median predictive probabilities, or the
    median across draws of the utility when ``median_of_utility``."""
    pi = np.atleast_2d(np.asarray(pi, dtype=float))
    omega = np.asarray(getattr(omega, "omega", omega), dtype=float)
    if pi.shape[0] == 0:
        raise ValueError("at least one draw is required")
    if median_of_utility:
        return float(np.median(pi @ omega))
    return float(np.median(pi, axis=0) @ omega)


def select_treatment(utilities):
    """1-based index of the best arm and whether the maximum was tied (ties
    go to the lowest index)."""
    u = np.asarray(utilities, dtype=float)
    if u.size < 2:
        raise ValueError("need at least two arms")
    best = int(np.argmax(u))
    tie = int(np.sum(u == u[best])) > 1
    return best + 1, tie


def predict_patients(trace, X_new, Z_new, omega, rng, median_of_utility: bool = False,
                     table: LogVTable | None = None):
    """Utilities, recommendations and median category probabilities for a
    batch of new patients. ``trace`` may be a list of chains, whose draws are
    pooled. Returns a dict of arrays."""
    traces = list(trace) if isinstance(trace, (list, tuple)) else [trace]
    X_new = np.asarray(X_new, dtype=float)
    m = X_new.shape[0] if X_new.ndim == 2 else (1 if X_new.size else 0)
    T = traces[0].T
    K = traces[0].theta[0].shape[1]
    if m == 0:
        return {"utility": np.zeros((0, T)), "median_pi": np.zeros((0, T, K)),
                "recommended": np.zeros(0, dtype=np.int64), "tie": np.zeros(0, dtype=bool)}
    X_new = X_new.reshape(m, -1)
    Z_new = np.asarray(Z_new, dtype=float).reshape(m, -1)
    util = np.zeros((m, T))
    med = np.zeros((m, T, K))
    rec = np.zeros(m, dtype=np.int64)
    tie = np.zeros(m, dtype=bool)
    caches = [{} for _ in traces]
    for i in range(m):
        pooled = [[] for _ in range(T)]
        for tr, cache in zip(traces, caches):
            draws = sample_predictive_response(tr, X_new[i], Z_new[i], rng, table, cache)
            for a in range(T):
                pooled[a].append(draws.pi[a])
        for a in range(T):
            pi = np.vstack(pooled[a])
            util[i, a] = median_predictive_utility(pi, omega, median_of_utility)
            med[i, a] = np.median(pi, axis=0)
        rec[i], tie[i] = select_treatment(util[i])
    return {"utility": util, "median_pi": med, "recommended": rec, "tie": tie}
