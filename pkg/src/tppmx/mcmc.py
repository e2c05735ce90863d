"""Metropolis-within-Gibbs sampler for the treatment-specific PPMx model.

One iteration, in order: for each arm the partition (Algorithm 8 with
Reuse), the cluster effects, the Normal-Wishart hyperparameters and the
(kappa, sigma) grid point; then the shared prognostic coefficients, their
horseshoe scales, and finally the latent gammas and auxiliaries of each arm.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats
from scipy.special import gammainc, gammaincinv

from . import _kernels
from .core_model import EXPONENT_CAP, CohortData, PartitionState
from .partition_prior import (NGGPGrid, LogVTable, default_table, log_cohesions,
                              sample_prior_partition)
from .similarity import SimilarityConfig, Standardizer

logger = logging.getLogger(__name__)

# bounds on 1/scale^2 in the horseshoe slice updates
W_MIN = 1e-12
W_MAX = 1e12


@dataclass(frozen=True)
class MCMCConfig:
    iterations: int = 12000
    burnin: int = 2000
    thin: int = 5
    M: int = 5
    eta_step: float = 0.5
    beta_step: float = 0.3
    adapt: bool = True
    adapt_batch: int = 50
    target_accept: float = 0.30
    seed: int = 0
    grid: NGGPGrid | None = None
    similarity: SimilarityConfig = field(default_factory=SimilarityConfig)
    vratio: bool = True
    mu0: float = 0.0
    nu0: float = 10.0
    s0: float | None = None
    Lam0: float = 10.0
    exponent_cap: float = EXPONENT_CAP
    likelihood: bool = True
    audit: bool = False

    def __post_init__(self):
        if self.iterations <= self.burnin:
            raise ValueError("iterations must exceed burn-in")
        if self.thin < 1 or self.M < 1:
            raise ValueError("thin and M must be >= 1")
        if self.eta_step < 0 or self.beta_step < 0:
            raise ValueError("proposal scales must be nonnegative")

    @property
    def kept(self) -> int:
        return (self.iterations - self.burnin) // self.thin

    def resolved_grid(self) -> NGGPGrid:
        return self.grid if self.grid is not None else NGGPGrid.default()

    def to_dict(self) -> dict:
        d = asdict(self)
        g = self.resolved_grid()
        d["grid"] = {"kappa": g.kappa.tolist(), "sigma": g.sigma.tolist(),
                     "log_weights": g.log_weights.tolist()}
        return d


@dataclass
class TraceStore:
    """Kept draws of one chain. Per-arm lists are indexed by arm."""

    labels: list
    C: list
    eta: list
    theta: list
    Lam: list
    grid_index: list
    kappa: list
    sigma: list
    beta: np.ndarray
    lam: np.ndarray
    tau: np.ndarray
    loglik: np.ndarray
    acceptance: dict
    warnings: dict
    meta: dict = field(default_factory=dict)

    @property
    def n_kept(self) -> int:
        return self.beta.shape[0]

    @property
    def T(self) -> int:
        return len(self.labels)


# --------------------------------------------------------------------------
# individual updates


def update_partition(state: PartitionState, clog, logd, zb, X, logVr, sigma, theta, chol_cov,
                     kinds, sim_params, sim_scale, config: MCMCConfig, counters, rng):
    """One Algorithm 8 sweep with Reuse over all units of an arm (in place)."""
    state.C = int(_kernels.sweep_partition(
        state.labels, state.sizes, state.C, state.eta, state.standby, state.xsum, state.xsq,
        clog, logd, zb, X, logVr, float(sigma), bool(config.vratio), theta, chol_cov, kinds,
        sim_params, float(sim_scale), bool(config.likelihood), float(config.exponent_cap),
        counters, rng))
    return state


def update_eta(state: PartitionState, logd, zb, theta, Lam, step, config: MCMCConfig, counters, rng):
    """Random-walk Metropolis on every occupied cluster effect; returns the
    number of accepted proposals."""
    return int(_kernels.update_eta(state.labels, state.C, state.eta, logd, zb, theta, Lam,
                                   float(step), bool(config.likelihood),
                                   float(config.exponent_cap), counters, rng))


def normal_wishart_posterior(eta, mu0, nu0, s0, Lam0):
    """Parameters of p(theta, Lambda | eta) for eta_j ~ N(theta, Lambda^-1),
    theta | Lambda ~ N(mu0, (nu0 Lambda)^-1), Lambda ~ Wishart with density
    proportional to |L|^(s0 - (K+1)/2) exp(-tr(Lam0 L)).

    Returns (mean, nu, shape, rate matrix)."""
    eta = np.atleast_2d(eta)
    C = eta.shape[0]
    ebar = eta.mean(axis=0)
    dev = eta - ebar
    S = dev.T @ dev
    diff = (ebar - mu0)[:, None]
    rate = Lam0 + 0.5 * (S + (nu0 * C / (nu0 + C)) * (diff @ diff.T))
    mean = (nu0 * mu0 + C * ebar) / (nu0 + C)
    return mean, nu0 + C, s0 + 0.5 * C, rate


def update_theta_lambda(eta, config: MCMCConfig, rng, warnings=None):
    """Draw (theta, Lambda) from their joint full conditional given the
    occupied cluster effects."""
    K = eta.shape[1]
    s0 = config.s0 if config.s0 is not None else K + 2.0
    mu0 = np.full(K, config.mu0)
    Lam0 = config.Lam0 * np.eye(K)
    mean, nu, shape, rate = normal_wishart_posterior(eta, mu0, config.nu0, s0, Lam0)
    scale = np.linalg.inv(2.0 * rate)
    scale = 0.5 * (scale + scale.T)
    Lam = np.atleast_2d(stats.wishart.rvs(df=2.0 * shape, scale=scale, random_state=rng))
    Lam = 0.5 * (Lam + Lam.T)
    try:
        np.linalg.cholesky(Lam)
    except np.linalg.LinAlgError:
        logger.warning("Wishart draw not positive definite; adding jitter")
        if warnings is not None:
            warnings["wishart_jitter"] += 1
        Lam = Lam + 1e-8 * np.eye(K)
    L = np.linalg.cholesky(Lam)
    # theta = mean + (nu Lambda)^{-1/2} z using the Cholesky factor of Lambda
    z = rng.standard_normal(K)
    theta = mean + np.linalg.solve(L.T, z) / math.sqrt(nu)
    return theta, Lam


def _truncated_exponential(rate, upper, rng):
    u = rng.random(np.shape(rate))
    rate = np.asarray(rate, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        x = -np.log1p(u * np.expm1(-rate * upper)) / rate
    # a vanishing rate leaves the uniform density on (0, upper)
    return np.where(rate * upper > 1e-12, x, u * upper)


def _truncated_gamma(shape, rate, upper, rng):
    u = rng.random(np.shape(rate))
    rate = np.asarray(rate, dtype=float)
    F = gammainc(shape, rate * upper)
    with np.errstate(divide="ignore", invalid="ignore"):
        x = gammaincinv(shape, u * F) / rate
    small = ~(F > 1e-300) | ~np.isfinite(x) | (x <= 0)
    # for rate*upper -> 0 the density is proportional to x^(shape-1) on (0, upper)
    return np.where(small, upper * u ** (1.0 / shape), x)


def update_horseshoe_scales(beta, lam, tau, rng):
    """Slice updates of the local (P x K) and global (K) half-Cauchy scales.
    Works on w = 1/scale^2 whose conditional is proportional to
    w^(a-1) exp(-w r) / (1 + w), restricted to [W_MIN, W_MAX] so that the
    scales cannot drift to numerical zero or infinity."""
    beta = np.asarray(beta, dtype=float)
    if beta.size == 0:
        return lam.copy(), tau.copy()
    P = beta.shape[0]
    w = 1.0 / lam ** 2
    h = rng.random(w.shape) / (1.0 + w)
    upper = np.minimum((1.0 - h) / h, W_MAX)
    w = _truncated_exponential(beta ** 2 / (2.0 * tau[None, :] ** 2), upper, rng)
    w = np.clip(w, W_MIN, W_MAX)
    lam = 1.0 / np.sqrt(w)
    wt = 1.0 / tau ** 2
    h = rng.random(wt.shape) / (1.0 + wt)
    upper = np.minimum((1.0 - h) / h, W_MAX)
    rate = (beta ** 2 / (2.0 * lam ** 2)).sum(axis=0)
    wt = _truncated_gamma(0.5 * (P + 1), rate, upper, rng)
    wt = np.clip(wt, W_MIN, W_MAX)
    return lam, 1.0 / np.sqrt(wt)


def update_beta(beta, logd, Z, lin, lam, tau, step, config: MCMCConfig, counters, rng):
    """Componentwise random-walk Metropolis for the shared coefficients using
    the stacked units of every arm. Returns the acceptance indicators."""
    if beta.size == 0:
        return np.zeros_like(beta, dtype=np.int64)
    prior_sd = lam * tau[None, :]
    return _kernels.update_beta(beta, logd, Z, lin, prior_sd, step,
                                float(config.exponent_cap), counters, rng)


def grid_step(sizes, logV_cols, grid: NGGPGrid, rng):
    """Sample a grid index given cluster sizes, with log V taken from the
    per-arm precomputed columns (G x (n+1))."""
    if len(grid) == 1:
        return 0
    C = sizes.size
    lp = grid.log_weights + logV_cols[:, C] + log_cohesions(sizes, grid.sigma)
    lp = lp - lp.max()
    p = np.exp(lp)
    return int(rng.choice(len(grid), p=p / p.sum()))


def pointwise_loglik(y0, labels, eta, zb, cap):
    """Dirichlet-multinomial log-likelihood of each unit at the current state."""
    lin = np.clip(eta[labels] + zb, -cap, cap)
    return lin[np.arange(y0.size), y0] - np.log(np.exp(lin).sum(axis=1))


# --------------------------------------------------------------------------
# chain driver


@dataclass
class _Arm:
    y0: np.ndarray
    Z: np.ndarray
    X: np.ndarray
    kinds: np.ndarray
    standardizer: Standardizer
    logV_cols: np.ndarray
    logVr: np.ndarray
    state: PartitionState
    clog: np.ndarray
    logd: np.ndarray
    logu: np.ndarray
    theta: np.ndarray
    Lam: np.ndarray
    g: int
    eta_step: float
    eta_acc: int = 0
    eta_tries: int = 0
    batch_acc: int = 0
    batch_tries: int = 0


def arm_logV_columns(n, grid: NGGPGrid, table: LogVTable | None = None):
    """log V(n, C) for C = 0..n at every grid point; entry 0 is -inf."""
    table = table or default_table()
    return np.array([table.column(n, k, s) for k, s in zip(grid.kappa, grid.sigma)])


def _vratios(cols):
    G, n1 = cols.shape
    r = np.zeros((G, n1))
    with np.errstate(invalid="ignore"):
        r[:, 1:-1] = cols[:, 2:] - cols[:, 1:-1]
    r[~np.isfinite(r)] = 0.0
    return r


def _chol_cov(Lam):
    return np.linalg.cholesky(np.linalg.inv(Lam))


def _init_arm(arm, K, config: MCMCConfig, grid, table, rng):
    sim = config.similarity
    kinds = sim.column_kinds(arm.X) if arm.X.shape[1] else np.zeros(0, dtype=np.int64)
    std = Standardizer.fit(arm.X, kinds, enabled=sim.standardize)
    X = np.ascontiguousarray(std.transform(arm.X))
    n = arm.n
    cols = arm_logV_columns(n, grid, table)
    g = int(np.argmax(grid.log_weights))
    labels = sample_prior_partition(n, grid.kappa[g], grid.sigma[g], rng, X=X,
                                    similarity=sim if sim.enabled else None, table=table)
    y0 = arm.y - 1
    C = int(labels.max()) + 1
    eta = np.zeros((n, K))
    for j in range(C):
        counts = np.bincount(y0[labels == j], minlength=K)
        eta[j] = np.log((counts + 1.0) / (counts.sum() + K))
    s0 = config.s0 if config.s0 is not None else K + 2.0
    Lam = (s0 / config.Lam0) * np.eye(K)
    theta = np.full(K, config.mu0)
    standby = theta + rng.standard_normal((config.M, K)) @ _chol_cov(Lam).T
    state = PartitionState.from_labels(labels, eta, standby, X)
    kargs = sim.kernel_args(X.shape[1], kinds)
    clog = np.zeros(n)
    for j in range(C):
        clog[j] = _kernels.cluster_log_similarity(state.sizes[j], state.xsum[j], state.xsq[j],
                                                  *kargs)
    lin = eta[labels]
    logd = np.empty((n, K))
    logu = np.zeros(n)
    counters = np.zeros(1, dtype=np.int64)
    _kernels.update_latent(y0, lin, logd, logu, config.exponent_cap, counters, rng)
    return _Arm(y0=y0, Z=np.ascontiguousarray(arm.Z), X=X, kinds=kinds, standardizer=std,
                logV_cols=cols, logVr=_vratios(cols), state=state, clog=clog, logd=logd, logu=logu,
                theta=theta, Lam=Lam, g=g, eta_step=config.eta_step)


def _adapt(step, rate, batch, target):
    gain = min(0.5, 1.0 / math.sqrt(batch))
    return step * math.exp(gain * (rate - target))


def chain_rngs(seed, chain, T):
    """Independent streams: one per arm plus one for the shared updates."""
    ss = np.random.SeedSequence([int(seed), int(chain)])
    return [np.random.Generator(np.random.PCG64(s)) for s in ss.spawn(T + 1)]


class ChainSampler:
    """State of one chain, advanced one full sweep at a time.

    Sweep order per iteration: for each arm the partition, cluster effects,
    (theta, Lambda) and the grid point; then the shared beta and horseshoe
    scales; then the latent (d, u) of every arm."""

    def __init__(self, data: CohortData, config: MCMCConfig, chain: int = 0,
                 table: LogVTable | None = None):
        self.t0 = time.perf_counter()
        self.data = data
        self.config = config
        self.chain = chain
        self.T, self.K, self.P = data.T, data.K, data.P
        self.grid = config.resolved_grid()
        self.rngs = chain_rngs(config.seed, chain, self.T)
        self.arms = [_init_arm(arm, self.K, config, self.grid, table, self.rngs[a])
                     for a, arm in enumerate(data.arms)]
        sim = config.similarity
        self.sim_args = [sim.kernel_args(ar.X.shape[1], ar.kinds) for ar in self.arms]
        P, K = self.P, self.K
        self.beta = np.zeros((P, K))
        self.lam = np.ones((P, K))
        self.tau = np.ones(K)
        self.beta_step = np.full((P, K), config.beta_step)
        self.beta_acc = np.zeros((P, K), dtype=np.int64)
        self.beta_batch = np.zeros((P, K), dtype=np.int64)
        self.counters = np.zeros(1, dtype=np.int64)
        self.warnings = {"exponent_cap": 0, "wishart_jitter": 0}
        self.Zall = (np.ascontiguousarray(np.vstack([ar.Z for ar in self.arms])) if P
                     else np.zeros((data.n, 0)))
        self.offsets = np.cumsum([0] + [ar.y0.size for ar in self.arms])
        self.zbs = [ar.Z @ self.beta for ar in self.arms]
        self.batch_no = 0
        self.it = 0

    def linear_predictor(self, a):
        ar = self.arms[a]
        return ar.state.eta[ar.state.labels] + self.zbs[a]

    def step(self):
        """One full iteration, including burn-in adaptation."""
        config = self.config
        grid = self.grid
        it = self.it
        for a, ar in enumerate(self.arms):
            rng = self.rngs[a]
            st = ar.state
            update_partition(st, ar.clog, ar.logd, self.zbs[a], ar.X, ar.logVr[ar.g],
                             grid.sigma[ar.g], ar.theta, _chol_cov(ar.Lam), *self.sim_args[a],
                             config, self.counters, rng)
            acc = update_eta(st, ar.logd, self.zbs[a], ar.theta, ar.Lam, ar.eta_step, config,
                             self.counters, rng)
            ar.eta_acc += acc
            ar.eta_tries += st.C
            ar.batch_acc += acc
            ar.batch_tries += st.C
            ar.theta, ar.Lam = update_theta_lambda(st.cluster_eta, config, rng, self.warnings)
            ar.g = grid_step(st.sizes[:st.C], ar.logV_cols, grid, rng)

        if self.P:
            lin = np.vstack([self.linear_predictor(a) for a in range(self.T)])
            logd_all = np.vstack([ar.logd for ar in self.arms])
            acc = update_beta(self.beta, logd_all, self.Zall, lin, self.lam, self.tau,
                              self.beta_step, config, self.counters, self.rngs[self.T])
            self.beta_acc += acc
            self.beta_batch += acc
            self.lam, self.tau = update_horseshoe_scales(self.beta, self.lam, self.tau,
                                                         self.rngs[self.T])
            self.zbs = [ar.Z @ self.beta for ar in self.arms]

        for a, ar in enumerate(self.arms):
            _kernels.update_latent(ar.y0, self.linear_predictor(a), ar.logd, ar.logu,
                                   config.exponent_cap, self.counters, self.rngs[a])

        if config.audit:
            for ar in self.arms:
                ar.state.check()
                assert np.all(np.isfinite(ar.logd)) and np.all(np.isfinite(ar.logu))
                np.linalg.cholesky(ar.Lam)

        if config.adapt and it < config.burnin and (it + 1) % config.adapt_batch == 0:
            self.batch_no += 1
            for ar in self.arms:
                if ar.batch_tries:
                    ar.eta_step = _adapt(ar.eta_step, ar.batch_acc / ar.batch_tries,
                                         self.batch_no, config.target_accept)
                ar.batch_acc = ar.batch_tries = 0
            if self.P:
                rate = self.beta_batch / config.adapt_batch
                gain = min(0.5, 1.0 / math.sqrt(self.batch_no))
                self.beta_step = self.beta_step * np.exp(gain * (rate - config.target_accept))
                self.beta_batch[:] = 0
        if it == config.burnin - 1:
            # acceptance counters report the post-adaptation phase only
            for ar in self.arms:
                ar.eta_acc = ar.eta_tries = 0
            self.beta_acc[:] = 0
        self.it += 1

    def set_responses(self, a, y0):
        """Replace the (0-based) responses of arm ``a`` and redraw its latent
        variables from their conditional."""
        ar = self.arms[a]
        ar.y0 = np.asarray(y0, dtype=np.int64)
        _kernels.update_latent(ar.y0, self.linear_predictor(a), ar.logd, ar.logu,
                               self.config.exponent_cap, self.counters, self.rngs[a])

    def acceptance(self):
        post = max(self.it - self.config.burnin, 1)
        return {
            "eta": [ar.eta_acc / max(ar.eta_tries, 1) for ar in self.arms],
            "eta_step": [ar.eta_step for ar in self.arms],
            "beta": (self.beta_acc / post).tolist() if self.P else [],
            "beta_step": self.beta_step.tolist(),
        }

    def meta(self):
        return {
            "seed": int(self.config.seed),
            "chain": int(self.chain),
            "K": self.K, "P": self.P, "Q": self.data.Q, "T": self.T,
            "n": [ar.y0.size for ar in self.arms],
            "ids": [list(arm.ids) for arm in self.data.arms],
            "X": [ar.X for ar in self.arms],
            "kinds": [ar.kinds for ar in self.arms],
            "std_mean": [ar.standardizer.mean for ar in self.arms],
            "std_sd": [ar.standardizer.sd for ar in self.arms],
            "config": self.config.to_dict(),
            "runtime_s": time.perf_counter() - self.t0,
        }


def run_chain(data: CohortData, config: MCMCConfig, chain: int = 0,
              table: LogVTable | None = None, progress=None) -> TraceStore:
    """Run one chain and return its kept draws."""
    smp = ChainSampler(data, config, chain, table)
    grid = smp.grid
    K, P = smp.K, smp.P
    arms = smp.arms
    kept = config.kept
    tr = dict(
        labels=[np.zeros((kept, ar.y0.size), dtype=np.int32) for ar in arms],
        C=[np.zeros(kept, dtype=np.int32) for _ in arms],
        eta=[np.full((kept, ar.y0.size, K), np.nan) for ar in arms],
        theta=[np.zeros((kept, K)) for _ in arms],
        Lam=[np.zeros((kept, K, K)) for _ in arms],
        grid_index=[np.zeros(kept, dtype=np.int32) for _ in arms],
    )
    tr_beta = np.zeros((kept, P, K))
    tr_lam = np.zeros((kept, P, K))
    tr_tau = np.zeros((kept, K))
    loglik = np.zeros((data.n, kept))
    offsets = smp.offsets

    t_keep = 0
    for it in range(config.iterations):
        smp.step()
        if it >= config.burnin and (it - config.burnin + 1) % config.thin == 0 and t_keep < kept:
            for a, ar in enumerate(arms):
                st = ar.state
                tr["labels"][a][t_keep] = st.labels
                tr["C"][a][t_keep] = st.C
                tr["eta"][a][t_keep, :st.C] = st.cluster_eta
                tr["theta"][a][t_keep] = ar.theta
                tr["Lam"][a][t_keep] = ar.Lam
                tr["grid_index"][a][t_keep] = ar.g
                loglik[offsets[a]:offsets[a + 1], t_keep] = pointwise_loglik(
                    ar.y0, st.labels, st.eta, smp.zbs[a], config.exponent_cap)
            tr_beta[t_keep] = smp.beta
            tr_lam[t_keep] = smp.lam
            tr_tau[t_keep] = smp.tau
            t_keep += 1
        if progress is not None:
            progress(it)

    warnings = smp.warnings
    warnings["exponent_cap"] = int(smp.counters[0])
    if warnings["exponent_cap"]:
        logger.warning("log-linear exponent capped %d times", warnings["exponent_cap"])
    return TraceStore(
        labels=tr["labels"], C=tr["C"], eta=tr["eta"], theta=tr["theta"], Lam=tr["Lam"],
        grid_index=tr["grid_index"],
        kappa=[grid.kappa[gi] for gi in tr["grid_index"]],
        sigma=[grid.sigma[gi] for gi in tr["grid_index"]],
        beta=tr_beta, lam=tr_lam, tau=tr_tau, loglik=loglik,
        acceptance=smp.acceptance(), warnings=warnings, meta=smp.meta())
