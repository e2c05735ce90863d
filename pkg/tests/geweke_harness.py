"""Joint-distribution check of the sampler on a small model.

The marginal-conditional simulator draws parameters from the prior and
responses given the parameters; the partition prior is sampled exactly by
enumerating every set partition. The successive-conditional simulator
alternates one sampler sweep with a fresh draw of the responses. Both must
produce the same joint distribution of parameters.
"""
from __future__ import annotations

import numpy as np
from scipy import stats

from tppmx import _kernels
from tppmx.core_model import ArmData, CohortData
from tppmx.mcmc import ChainSampler, MCMCConfig
from tppmx.partition_prior import NGGPGrid, eppf_logprob, set_partitions
from tppmx.similarity import SimilarityConfig

T, N_ARM, K, P, Q = 2, 8, 3, 1, 1
KAPPA, SIGMA = 1.0, 0.3


def toy_design(seed=11):
    rng = np.random.default_rng(seed)
    X = [rng.standard_normal((N_ARM, Q)) for _ in range(T)]
    Z = [rng.standard_normal((N_ARM, P)) for _ in range(T)]
    return X, Z


def toy_config(seed=0):
    return MCMCConfig(iterations=2, burnin=1, thin=1, adapt=False, seed=seed, exponent_cap=300.0,
                      grid=NGGPGrid.single(KAPPA, SIGMA), similarity=SimilarityConfig())


def partition_table(Xs, sim: SimilarityConfig):
    """All set partitions of one arm with their normalised PPMx prior
    probabilities."""
    kinds, params, scale = sim.kernel_args(Xs.shape[1])
    parts = np.array(list(set_partitions(N_ARM)))
    lp = np.empty(len(parts))
    for r, lab in enumerate(parts):
        s = eppf_logprob(lab, KAPPA, SIGMA)
        for j in range(lab.max() + 1):
            x = Xs[lab == j]
            s += _kernels.cluster_log_similarity(x.shape[0], x.sum(axis=0), (x * x).sum(axis=0),
                                                 kinds, params, scale)
        lp[r] = s
    p = np.exp(lp - lp.max())
    return parts, p / p.sum()


def draw_responses(lin, rng):
    """0-based responses with P(y = k) proportional to exp(lin_k)."""
    p = np.exp(lin - lin.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    u = rng.random(lin.shape[0])[:, None]
    return np.minimum((p.cumsum(axis=1) < u).sum(axis=1), K - 1)


def summaries(beta, C, eta_mean):
    """Bounded functionals monitored in both simulators."""
    b = np.tanh(beta)
    return np.concatenate([b, b * b, np.asarray(C, dtype=float), eta_mean])


SUMMARY_NAMES = ([f"tanh(beta_{k + 1})" for k in range(K)]
                 + [f"tanh(beta_{k + 1})^2" for k in range(K)]
                 + [f"C_arm{a + 1}" for a in range(T)]
                 + [f"mean_eta_arm{a + 1}_{k + 1}" for a in range(T) for k in range(K)])


def marginal_draws(n_draws, Xstd, config: MCMCConfig, seed=1):
    rng = np.random.default_rng(seed)
    sim = config.similarity
    tables = [partition_table(Xstd[a], sim) for a in range(T)]
    s0 = K + 2.0 if config.s0 is None else config.s0
    out = np.empty((n_draws, len(SUMMARY_NAMES)))
    scale = np.linalg.inv(2.0 * config.Lam0 * np.eye(K))
    for i in range(n_draws):
        lam = np.abs(stats.cauchy.rvs(size=(P, K), random_state=rng))
        tau = np.abs(stats.cauchy.rvs(size=K, random_state=rng))
        beta = rng.standard_normal((P, K)) * lam * tau[None, :]
        Cs, means = [], []
        for a in range(T):
            parts, prob = tables[a]
            lab = parts[rng.choice(len(parts), p=prob)]
            C = lab.max() + 1
            Lam = np.atleast_2d(stats.wishart.rvs(df=2.0 * s0, scale=scale, random_state=rng))
            L = np.linalg.cholesky(Lam)
            theta = config.mu0 + np.linalg.solve(L.T, rng.standard_normal(K)) / np.sqrt(config.nu0)
            eta = theta + np.linalg.solve(L.T, rng.standard_normal((K, C))).T
            Cs.append(C)
            means.append(eta.mean(axis=0))
        out[i] = summaries(beta[0], Cs, np.concatenate(means))
    return out


def successive_draws(n_draws, X, Z, config: MCMCConfig, thin=1, burn=200, seed=2):
    rng = np.random.default_rng(seed)
    y0 = [rng.integers(1, K + 1, N_ARM) for _ in range(T)]
    data = CohortData(tuple(ArmData(y0[a], Z[a], X[a]) for a in range(T)), K)
    smp = ChainSampler(data, config)
    out = np.empty((n_draws, len(SUMMARY_NAMES)))
    total = burn + n_draws * thin
    t = 0
    for it in range(total):
        smp.step()
        for a in range(T):
            smp.set_responses(a, draw_responses(smp.linear_predictor(a), rng))
        if it >= burn and (it - burn + 1) % thin == 0:
            Cs = [ar.state.C for ar in smp.arms]
            means = np.concatenate([ar.state.cluster_eta.mean(axis=0) for ar in smp.arms])
            out[t] = summaries(smp.beta[0], Cs, means)
            t += 1
    return out, smp


def batch_means_se(x, n_batches=50):
    """Standard error of the mean of an autocorrelated series."""
    x = np.asarray(x, dtype=float)
    m = x.size // n_batches
    b = x[: m * n_batches].reshape(n_batches, m).mean(axis=1)
    return b.std(ddof=1) / np.sqrt(n_batches)


def geweke_z(marg, succ):
    z = np.empty(marg.shape[1])
    for j in range(marg.shape[1]):
        se2 = marg[:, j].var(ddof=1) / marg.shape[0] + batch_means_se(succ[:, j]) ** 2
        z[j] = (succ[:, j].mean() - marg[:, j].mean()) / np.sqrt(se2)
    return z


# --------------------------------------------------------------------------
# replicated chains started from exact joint draws


def _prior_params(rng, tables, config: MCMCConfig):
    s0 = K + 2.0 if config.s0 is None else config.s0
    scale = np.linalg.inv(2.0 * config.Lam0 * np.eye(K))
    lam = np.abs(stats.cauchy.rvs(size=(P, K), random_state=rng))
    tau = np.abs(stats.cauchy.rvs(size=K, random_state=rng))
    beta = rng.standard_normal((P, K)) * lam * tau[None, :]
    arms = []
    for a in range(T):
        parts, prob = tables[a]
        lab = parts[rng.choice(len(parts), p=prob)]
        C = lab.max() + 1
        Lam = np.atleast_2d(stats.wishart.rvs(df=2.0 * s0, scale=scale, random_state=rng))
        L = np.linalg.cholesky(Lam)
        theta = config.mu0 + np.linalg.solve(L.T, rng.standard_normal(K)) / np.sqrt(config.nu0)
        eta = theta + np.linalg.solve(L.T, rng.standard_normal((K, C))).T
        arms.append((lab, eta, theta, Lam))
    return beta, lam, tau, arms


def load_prior_draw(smp: ChainSampler, rng, tables):
    """Overwrite the sampler state with an exact draw from the joint of
    parameters, responses and latent variables."""
    from tppmx.core_model import PartitionState

    cfg = smp.config
    beta, lam, tau, arms = _prior_params(rng, tables, cfg)
    smp.beta[:] = beta
    smp.lam = lam
    smp.tau = tau
    smp.zbs = [ar.Z @ smp.beta for ar in smp.arms]
    for a, (lab, eta, theta, Lam) in enumerate(arms):
        ar = smp.arms[a]
        cov = np.linalg.inv(Lam)
        standby = rng.multivariate_normal(theta, cov, size=cfg.M)
        full = np.zeros((N_ARM, K))
        full[:eta.shape[0]] = eta
        ar.state = PartitionState.from_labels(lab, full, standby, ar.X)
        kargs = smp.sim_args[a]
        ar.clog = np.zeros(N_ARM)
        for j in range(ar.state.C):
            ar.clog[j] = _kernels.cluster_log_similarity(ar.state.sizes[j], ar.state.xsum[j],
                                                         ar.state.xsq[j], *kargs)
        ar.theta, ar.Lam = theta, Lam
        lin = smp.linear_predictor(a)
        # u | gamma is Lomax with shape sum(gamma); then d | u, y and u | d
        G = np.exp(np.clip(lin, -cfg.exponent_cap, cfg.exponent_cap)).sum(axis=1)
        x = rng.standard_exponential(N_ARM) / G
        ar.logu = x + np.log(-np.expm1(-x))
        smp.set_responses(a, draw_responses(lin, rng))


def current_summary(smp: ChainSampler):
    Cs = [ar.state.C for ar in smp.arms]
    means = np.concatenate([ar.state.cluster_eta.mean(axis=0) for ar in smp.arms])
    return summaries(smp.beta[0], Cs, means)


def replicated_draws(n_reps, steps, X, Z, config: MCMCConfig, seed=3):
    """For each replicate: exact joint draw, then ``steps`` successive
    conditional steps. Returns (n_reps x summaries) at the final step and the
    same summaries at the exact starting draws."""
    rng = np.random.default_rng(seed)
    y0 = [rng.integers(1, K + 1, N_ARM) for _ in range(T)]
    data = CohortData(tuple(ArmData(y0[a], Z[a], X[a]) for a in range(T)), K)
    smp = ChainSampler(data, config)
    tables = [partition_table(ar.X, config.similarity) for ar in smp.arms]
    start = np.empty((n_reps, len(SUMMARY_NAMES)))
    end = np.empty_like(start)
    for r in range(n_reps):
        load_prior_draw(smp, rng, tables)
        start[r] = current_summary(smp)
        for _ in range(steps):
            smp.step()
            for a in range(T):
                smp.set_responses(a, draw_responses(smp.linear_predictor(a), rng))
        end[r] = current_summary(smp)
    return end, start, smp


def two_sample_z(a, b):
    se = np.sqrt(a.var(axis=0, ddof=1) / a.shape[0] + b.var(axis=0, ddof=1) / b.shape[0])
    return (a.mean(axis=0) - b.mean(axis=0)) / se


def paired_z(end, start):
    """z statistic of the mean change from the exact starting draws."""
    d = end - start
    se = d.std(axis=0, ddof=1) / np.sqrt(d.shape[0])
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(se > 0, d.mean(axis=0) / se, 0.0)
