"""Compiled inner loops of the sampler and simulators.

All kernels take a ``numpy.random.Generator`` and work on 0-based labels.
Augmented-likelihood terms that do not depend on the cluster effects
(``log d_{i,y}``, ``-d (u+1)``) are dropped wherever only ratios are needed.
"""
import math

import numba
import numpy as np

from .similarity import added_log_similarity, cluster_log_similarity


@numba.njit(cache=True)
def _categorical(logw, m, rng):
    mx = -np.inf
    for j in range(m):
        if logw[j] > mx:
            mx = logw[j]
    tot = 0.0
    for j in range(m):
        logw[j] = math.exp(logw[j] - mx)
        tot += logw[j]
    r = rng.random() * tot
    acc = 0.0
    for j in range(m):
        acc += logw[j]
        if r < acc:
            return j
    return m - 1


@numba.njit(cache=True)
def _capped(lin, cap, counters):
    if lin > cap:
        counters[0] += 1
        return cap
    if lin < -cap:
        counters[0] += 1
        return -cap
    return lin


@numba.njit(cache=True)
def _gamma_term(lin, logd, cap, counters):
    # log Gamma(d; g, 1) without the -log d term, which is free of g and is
    # huge for small g; keeping it would cancel catastrophically in ratios
    g = math.exp(_capped(lin, cap, counters))
    return g * logd - math.lgamma(g)


@numba.njit(cache=True)
def unit_loglik(logd_i, zb_i, eta_j, cap, counters):
    """Augmented log-likelihood of one unit at cluster effect ``eta_j``, up to
    terms free of the effect."""
    tot = 0.0
    for k in range(eta_j.shape[0]):
        tot += _gamma_term(eta_j[k] + zb_i[k], logd_i[k], cap, counters)
    return tot


@numba.njit(cache=True)
def _draw_g0(out, theta, chol_cov, rng):
    K = theta.shape[0]
    e = np.empty(K)
    for k in range(K):
        e[k] = rng.standard_normal()
    for k in range(K):
        s = theta[k]
        for l in range(k + 1):
            s += chol_cov[k, l] * e[l]
        out[k] = s


@numba.njit(cache=True)
def log_gamma_variate(shape, rng):
    if shape < 1.0:
        return math.log(rng.standard_gamma(shape + 1.0)) + math.log(rng.random()) / shape
    return math.log(rng.standard_gamma(shape))


# --------------------------------------------------------------------------
# prior simulation


@numba.njit(cache=True)
def sequential_prior(R, sigma, X, kinds, params, scale, rng):
    """Sequential allocation of ``X.shape[0]`` units. ``R[m, C]`` is the log
    new-cluster ratio log V(m, C+1) - log V(m, C)."""
    n = X.shape[0]
    Q = X.shape[1]
    labels = np.zeros(n, dtype=np.int64)
    sizes = np.zeros(n, dtype=np.int64)
    xsum = np.zeros((n, Q))
    xsq = np.zeros((n, Q))
    clog = np.zeros(n)
    cand = np.zeros(n + 1)
    logw = np.empty(n + 1)
    zero = np.zeros(Q)
    sim_on = scale != 0.0 and Q > 0
    sizes[0] = 1
    for q in range(Q):
        xsum[0, q] = X[0, q]
        xsq[0, q] = X[0, q] * X[0, q]
    if sim_on:
        clog[0] = cluster_log_similarity(1, xsum[0], xsq[0], kinds, params, scale)
    C = 1
    for i in range(1, n):
        for j in range(C):
            lw = math.log(sizes[j] - sigma)
            if sim_on:
                cand[j] = added_log_similarity(sizes[j], xsum[j], xsq[j], X[i], kinds, params, scale)
                lw += cand[j] - clog[j]
            logw[j] = lw
        lw = R[i + 1, C]
        if sim_on:
            cand[C] = added_log_similarity(0, zero, zero, X[i], kinds, params, scale)
            lw += cand[C]
        logw[C] = lw
        c = _categorical(logw, C + 1, rng)
        labels[i] = c
        sizes[c] += 1
        for q in range(Q):
            xsum[c, q] += X[i, q]
            xsq[c, q] += X[i, q] * X[i, q]
        clog[c] = cand[c]
        if c == C:
            C += 1
    return labels


# --------------------------------------------------------------------------
# partition sweep (Algorithm 8 with Reuse)


@numba.njit(cache=True)
def sweep_partition(labels, sizes, C, eta, standby, xsum, xsq, clog, logd, zb, X,
                    logVr, sigma, use_vratio, theta, chol_cov, kinds, params, scale,
                    lik_on, cap, counters, rng):
    """One pass over all units; returns the new cluster count. Arrays are
    updated in place. ``logVr[C]`` = log V(n, C+1) - log V(n, C)."""
    n = labels.shape[0]
    K = eta.shape[1]
    M = standby.shape[0]
    Q = X.shape[1]
    logM = math.log(M)
    logw = np.empty(n + M)
    cand = np.empty(n)
    zero = np.zeros(Q)
    sim_on = scale != 0.0 and Q > 0
    for i in range(n):
        j = labels[i]
        sizes[j] -= 1
        for q in range(Q):
            xsum[j, q] -= X[i, q]
            xsq[j, q] -= X[i, q] * X[i, q]
        if sizes[j] == 0:
            m = rng.integers(0, M)
            for k in range(K):
                standby[m, k] = eta[j, k]
            for h in range(j, C - 1):
                sizes[h] = sizes[h + 1]
                clog[h] = clog[h + 1]
                for k in range(K):
                    eta[h, k] = eta[h + 1, k]
                for q in range(Q):
                    xsum[h, q] = xsum[h + 1, q]
                    xsq[h, q] = xsq[h + 1, q]
            C -= 1
            sizes[C] = 0
            clog[C] = 0.0
            for q in range(Q):
                xsum[C, q] = 0.0
                xsq[C, q] = 0.0
            for t in range(n):
                if labels[t] > j:
                    labels[t] -= 1
        elif sim_on:
            clog[j] = cluster_log_similarity(sizes[j], xsum[j], xsq[j], kinds, params, scale)

        for h in range(C):
            lw = math.log(sizes[h] - sigma)
            if sim_on:
                cand[h] = added_log_similarity(sizes[h], xsum[h], xsq[h], X[i], kinds, params, scale)
                lw += cand[h] - clog[h]
            if lik_on:
                lw += unit_loglik(logd[i], zb[i], eta[h], cap, counters)
            logw[h] = lw
        base = -logM
        if use_vratio:
            base += logVr[C]
        single = 0.0
        if sim_on:
            single = added_log_similarity(0, zero, zero, X[i], kinds, params, scale)
            base += single
        for m in range(M):
            lw = base
            if lik_on:
                lw += unit_loglik(logd[i], zb[i], standby[m], cap, counters)
            logw[C + m] = lw
        c = _categorical(logw, C + M, rng)
        if c < C:
            labels[i] = c
            sizes[c] += 1
            for q in range(Q):
                xsum[c, q] += X[i, q]
                xsq[c, q] += X[i, q] * X[i, q]
            if sim_on:
                clog[c] = cand[c]
        else:
            m = c - C
            for k in range(K):
                eta[C, k] = standby[m, k]
            _draw_g0(standby[m], theta, chol_cov, rng)
            labels[i] = C
            sizes[C] = 1
            for q in range(Q):
                xsum[C, q] = X[i, q]
                xsq[C, q] = X[i, q] * X[i, q]
            clog[C] = single
            C += 1
    for m in range(M):
        _draw_g0(standby[m], theta, chol_cov, rng)
    return C


# --------------------------------------------------------------------------
# Metropolis steps


@numba.njit(cache=True)
def update_eta(labels, C, eta, logd, zb, theta, Lam, step, lik_on, cap, counters, rng):
    """Gaussian random-walk update of each occupied cluster effect; returns
    the number of accepted proposals."""
    n = labels.shape[0]
    K = eta.shape[1]
    # members grouped by cluster
    start = np.zeros(C + 1, dtype=np.int64)
    for i in range(n):
        start[labels[i] + 1] += 1
    for j in range(C):
        start[j + 1] += start[j]
    fill = start[:C].copy()
    members = np.empty(n, dtype=np.int64)
    for i in range(n):
        members[fill[labels[i]]] = i
        fill[labels[i]] += 1
    prop = np.empty(K)
    dc = np.empty(K)
    dp = np.empty(K)
    accepted = 0
    for j in range(C):
        for k in range(K):
            prop[k] = eta[j, k] + step * rng.standard_normal()
            dc[k] = eta[j, k] - theta[k]
            dp[k] = prop[k] - theta[k]
        lr = 0.0
        for k in range(K):
            for l in range(K):
                lr -= 0.5 * Lam[k, l] * (dp[k] * dp[l] - dc[k] * dc[l])
        if lik_on:
            for t in range(start[j], start[j + 1]):
                i = members[t]
                lr += unit_loglik(logd[i], zb[i], prop, cap, counters)
                lr -= unit_loglik(logd[i], zb[i], eta[j], cap, counters)
        if math.log(rng.random()) < lr:
            for k in range(K):
                eta[j, k] = prop[k]
            accepted += 1
    return accepted


@numba.njit(cache=True)
def update_beta(beta, logd, Z, lin, prior_sd, step, cap, counters, rng):
    """Componentwise random-walk update of the shared coefficients over the
    stacked units of all arms. ``lin`` (N x K) holds eta_{e_i} + z_i beta and
    is kept in sync. Returns a P x K acceptance indicator array."""
    P, K = beta.shape
    N = Z.shape[0]
    acc = np.zeros((P, K), dtype=np.int64)
    for p in range(P):
        for k in range(K):
            b = beta[p, k]
            bp = b + step[p, k] * rng.standard_normal()
            diff = bp - b
            v = prior_sd[p, k] * prior_sd[p, k]
            lr = -0.5 * (bp * bp - b * b) / v
            for i in range(N):
                if Z[i, p] != 0.0:
                    lr += _gamma_term(lin[i, k] + diff * Z[i, p], logd[i, k], cap, counters)
                    lr -= _gamma_term(lin[i, k], logd[i, k], cap, counters)
            if math.log(rng.random()) < lr:
                beta[p, k] = bp
                for i in range(N):
                    lin[i, k] += diff * Z[i, p]
                acc[p, k] = 1
    return acc


# --------------------------------------------------------------------------
# latent gammas


@numba.njit(cache=True)
def update_latent(y, lin, logd, logu, cap, counters, rng):
    """Draw d_i | u_i then u_i | d_i for every unit (``y`` 0-based). Both
    latents are kept on the log scale: u can be astronomically large when
    every gamma of a unit is tiny."""
    n, K = lin.shape
    for i in range(n):
        lu = logu[i]
        l1 = lu + math.log1p(math.exp(-lu)) if lu > 0.0 else math.log1p(math.exp(lu))
        m = -np.inf
        for k in range(K):
            shape = math.exp(_capped(lin[i, k], cap, counters))
            if k == y[i]:
                shape += 1.0
            logd[i, k] = log_gamma_variate(shape, rng) - l1
            if logd[i, k] > m:
                m = logd[i, k]
        s = 0.0
        for k in range(K):
            s += math.exp(logd[i, k] - m)
        logu[i] = math.log(rng.standard_exponential()) - (m + math.log(s))


# --------------------------------------------------------------------------
# posterior predictive


@numba.njit(cache=True)
def predictive_log_weights(x, sizes, xsum, xsq, C, sigma, log_new, M, kinds, params, scale):
    """Unnormalised log weights of the C occupied clusters followed by the M
    new-cluster slots for a new unit with covariates ``x``."""
    Q = x.shape[0]
    out = np.empty(C + M)
    sim_on = scale != 0.0 and Q > 0
    zero = np.zeros(Q)
    for j in range(C):
        lw = math.log(sizes[j] - sigma)
        if sim_on:
            lw += (added_log_similarity(sizes[j], xsum[j], xsq[j], x, kinds, params, scale)
                   - cluster_log_similarity(sizes[j], xsum[j], xsq[j], kinds, params, scale))
        out[j] = lw
    lw = log_new - math.log(M)
    if sim_on:
        lw += added_log_similarity(0, zero, zero, x, kinds, params, scale)
    for m in range(M):
        out[C + m] = lw
    return out


@numba.njit(cache=True)
def cluster_stats(labels, C, X):
    n, Q = X.shape
    sizes = np.zeros(C, dtype=np.int64)
    xsum = np.zeros((C, Q))
    xsq = np.zeros((C, Q))
    for i in range(n):
        j = labels[i]
        sizes[j] += 1
        for q in range(Q):
            xsum[j, q] += X[i, q]
            xsq[j, q] += X[i, q] * X[i, q]
    return sizes, xsum, xsq


@numba.njit(cache=True)
def predict_draws(x, zb, labels, Cs, eta, theta, chol_cov, sigma, log_new, X, M,
                  kinds, params, scale, cap, counters, rng):
    """Posterior-predictive response probabilities of one new unit, one per
    kept draw. ``zb`` is (draws x K) = z_new @ beta per draw. Returns
    (pi, assigned) where ``assigned`` is the cluster index or -1 for new."""
    T = labels.shape[0]
    K = eta.shape[2]
    pi = np.empty((T, K))
    assigned = np.empty(T, dtype=np.int64)
    e = np.empty(K)
    lg = np.empty(K)
    for t in range(T):
        C = Cs[t]
        sizes, xsum, xsq = cluster_stats(labels[t], C, X)
        lw = predictive_log_weights(x, sizes, xsum, xsq, C, sigma[t], log_new[t], M,
                                    kinds, params, scale)
        c = _categorical(lw, C + M, rng)
        if c < C:
            for k in range(K):
                e[k] = eta[t, c, k]
            assigned[t] = c
        else:
            _draw_g0(e, theta[t], chol_cov[t], rng)
            assigned[t] = -1
        mx = -np.inf
        for k in range(K):
            shape = math.exp(_capped(e[k] + zb[t, k], cap, counters))
            lg[k] = log_gamma_variate(shape, rng)
            if lg[k] > mx:
                mx = lg[k]
        tot = 0.0
        for k in range(K):
            lg[k] = math.exp(lg[k] - mx)
            tot += lg[k]
        for k in range(K):
            pi[t, k] = lg[k] / tot
    return pi, assigned
