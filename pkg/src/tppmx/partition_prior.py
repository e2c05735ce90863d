"""NGGP partition prior: cohesion, normalising constants, eppf, (kappa, sigma)
grid and sequential prior simulation.

The normalising constant is the Gibbs-type weight of a normalised generalised
gamma process with total mass ``kappa`` and unit tilting,

    V(n, C) = kappa**C / Gamma(n) * int_0^inf u**(n-1) (1+u)**(sigma*C - n)
              * exp(-(kappa/sigma) * ((1+u)**sigma - 1)) du,

which reduces to the Dirichlet process weight ``kappa**C Gamma(kappa) /
Gamma(kappa+n)`` as ``sigma -> 0``.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import numpy as np
from scipy import optimize, stats
from scipy.special import gammaln, logsumexp


class QuadratureError(RuntimeError):
    """The adaptive quadrature for log V failed to converge."""

    def __init__(self, message, **diagnostics):
        super().__init__(f"{message} ({diagnostics})")
        self.diagnostics = diagnostics


# --------------------------------------------------------------------------
# cohesion


def log_cohesion(n_j: int, sigma: float) -> float:
    """log of the rising factorial (1 - sigma)_(n_j - 1)."""
    if sigma >= 1.0:
        raise ValueError("sigma must be < 1")
    if n_j < 1:
        raise ValueError("cluster size must be >= 1")
    return float(gammaln(n_j - sigma) - gammaln(1.0 - sigma))


def log_cohesion_add_ratio(n_j: int, sigma: float) -> float:
    return math.log(n_j - sigma)


def log_cohesions(sizes, sigma) -> np.ndarray:
    """Vectorised ``sum_j log_cohesion(n_j, sigma)`` over an array of sigmas."""
    sizes = np.asarray(sizes, dtype=float)
    sigma = np.atleast_1d(np.asarray(sigma, dtype=float))
    return (gammaln(sizes[None, :] - sigma[:, None]).sum(axis=1)
            - sizes.size * gammaln(1.0 - sigma))


# --------------------------------------------------------------------------
# normalising constants


def dp_log_V(n: int, C: int, kappa: float) -> float:
    """Closed-form Dirichlet process normaliser."""
    return float(C * math.log(kappa) + gammaln(kappa) - gammaln(kappa + n))


@dataclass(frozen=True)
class QuadratureSettings:
    nodes: int = 256
    rtol: float = 1e-9
    max_nodes: int = 1 << 17
    drop: float = 80.0   # integrand range kept below the mode, in log units


def _log_integrand(w, n, C, kappa, sigma):
    L = np.logaddexp(0.0, w)               # log(1 + e^w)
    return n * w + (sigma * C - n) * L - (kappa / sigma) * np.expm1(sigma * L)


def _bracket(fun, x0, step, limit=1e6):
    """Expand from x0 in direction sign(step) until fun changes sign."""
    x = x0 + step
    while fun(x) > 0:
        step *= 2.0
        x = x0 + step
        if abs(step) > limit:
            raise QuadratureError("could not bracket integrand", x0=x0, step=step)
    return x


def _quad_log_V(n, C, kappa, sigma, settings: QuadratureSettings):
    def dlog(w):
        u_frac = 0.5 * (1.0 + math.tanh(0.5 * w))      # u / (1 + u)
        L = max(w, 0.0) + math.log1p(math.exp(-abs(w)))
        return n + (sigma * C - n) * u_frac - kappa * u_frac * math.exp(sigma * L)

    # mode of the (log-concave in w) integrand
    lo = _bracket(lambda w: -dlog(w), 0.0, -1.0) if dlog(0.0) < 0 else 0.0
    hi = _bracket(dlog, 0.0, 1.0) if dlog(0.0) > 0 else 0.0
    if lo == hi:
        w_mode = 0.0
    else:
        w_mode = optimize.brentq(dlog, min(lo, hi), max(lo, hi), xtol=1e-12)
    f_mode = float(_log_integrand(np.array(w_mode), n, C, kappa, sigma))
    target = f_mode - settings.drop

    def g(w):
        return float(_log_integrand(np.array(w), n, C, kappa, sigma)) - target

    a_out = _bracket(g, w_mode, -1.0)
    b_out = _bracket(g, w_mode, 1.0)
    a = optimize.brentq(g, a_out, w_mode, xtol=1e-8)
    b = optimize.brentq(g, w_mode, b_out, xtol=1e-8)

    N = settings.nodes
    prev = None
    while N <= settings.max_nodes:
        w = np.linspace(a, b, N + 1)
        f = _log_integrand(w, n, C, kappa, sigma)
        f[0] -= math.log(2.0)
        f[-1] -= math.log(2.0)
        val = logsumexp(f) + math.log((b - a) / N)
        if prev is not None and abs(val - prev) < settings.rtol:
            return val
        prev = val
        N *= 2
    raise QuadratureError("log V quadrature did not converge", n=n, C=C,
                          kappa=kappa, sigma=sigma, last=prev, nodes=N // 2)


class LogVTable:
    """Cache of log V(n, C) keyed by (n, C, kappa, sigma, quadrature settings)."""

    def __init__(self, settings: QuadratureSettings | None = None):
        self.settings = settings or QuadratureSettings()
        self._cache: dict = {}
        self._lock = threading.Lock()

    def __call__(self, n, C, kappa, sigma):
        key = (int(n), int(C), float(kappa), float(sigma), self.settings)
        try:
            return self._cache[key]
        except KeyError:
            pass
        val = _log_V_uncached(int(n), int(C), float(kappa), float(sigma), self.settings)
        with self._lock:
            self._cache[key] = val
        return val

    def column(self, n, kappa, sigma) -> np.ndarray:
        """log V(n, C) for C = 0..n (entry 0 is -inf)."""
        out = np.full(n + 2, -np.inf)
        for C in range(1, n + 1):
            out[C] = self(n, C, kappa, sigma)
        return out

    def triangle(self, n, kappa, sigma) -> np.ndarray:
        """log V(m, C) for 1 <= C <= m <= n, -inf elsewhere; shape (n+2, n+2)."""
        out = np.full((n + 2, n + 2), -np.inf)
        for m in range(1, n + 1):
            for C in range(1, m + 1):
                out[m, C] = self(m, C, kappa, sigma)
        return out

    def __len__(self):
        return len(self._cache)


def _log_V_uncached(n, C, kappa, sigma, settings):
    if not 1 <= C <= n:
        raise ValueError("need 1 <= C <= n")
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    if not 0.0 <= sigma < 1.0:
        raise ValueError("sigma must lie in [0, 1)")
    if n == 1:
        return 0.0
    if sigma == 0.0:
        return dp_log_V(n, C, kappa)
    return float(C * math.log(kappa) - gammaln(n) + _quad_log_V(n, C, kappa, sigma, settings))


_DEFAULT_TABLE = LogVTable()


def log_V(n: int, C: int, kappa: float, sigma: float, table: LogVTable | None = None) -> float:
    return (table or _DEFAULT_TABLE)(n, C, kappa, sigma)


def default_table() -> LogVTable:
    return _DEFAULT_TABLE


# --------------------------------------------------------------------------
# eppf


def partition_sizes(partition) -> np.ndarray:
    labels = np.asarray(partition)
    _, counts = np.unique(labels, return_counts=True)
    return counts


def eppf_logprob(partition, kappa: float, sigma: float, table: LogVTable | None = None) -> float:
    """log prior probability of a set partition given as a label vector."""
    sizes = partition_sizes(partition)
    n = int(sizes.sum())
    return log_V(n, sizes.size, kappa, sigma, table) + float(
        sum(log_cohesion(int(s), sigma) for s in sizes))


def set_partitions(n: int):
    """Yield every set partition of range(n) as a 0-based restricted-growth label array."""
    if n < 1:
        return
    labels = np.zeros(n, dtype=np.int64)

    def rec(i, top):
        if i == n:
            yield labels.copy()
            return
        for v in range(top + 2):
            labels[i] = v
            yield from rec(i + 1, max(top, v))

    yield from rec(1, 0)


# --------------------------------------------------------------------------
# (kappa, sigma) grid


@dataclass(frozen=True)
class NGGPGrid:
    """Discrete prior over (kappa, sigma) pairs."""

    kappa: np.ndarray
    sigma: np.ndarray
    log_weights: np.ndarray

    def __post_init__(self):
        lw = np.asarray(self.log_weights, dtype=float)
        object.__setattr__(self, "kappa", np.asarray(self.kappa, dtype=float))
        object.__setattr__(self, "sigma", np.asarray(self.sigma, dtype=float))
        object.__setattr__(self, "log_weights", lw - logsumexp(lw))
        if np.any(self.kappa <= 0) or np.any((self.sigma < 0) | (self.sigma >= 1)):
            raise ValueError("grid points need kappa > 0 and 0 <= sigma < 1")

    def __len__(self):
        return self.kappa.size

    @property
    def points(self):
        return list(zip(self.kappa.tolist(), self.sigma.tolist()))

    @classmethod
    def default(cls, n_kappa=10, n_sigma=10, kappa_max=15.0, sigma_max=0.6,
                kappa_prior=(2.0, 1.0), sigma_prior=(5.0, 23.0)):
        """Bin-midpoint grid whose marginal weights discretise
        Gamma(shape, rate) for kappa and Beta(a, b) for sigma."""
        kb = np.linspace(0.0, kappa_max, n_kappa + 1)
        sb = np.linspace(0.0, sigma_max, n_sigma + 1)
        kmid = 0.5 * (kb[1:] + kb[:-1])
        smid = 0.5 * (sb[1:] + sb[:-1])
        kw = np.diff(stats.gamma.cdf(kb, a=kappa_prior[0], scale=1.0 / kappa_prior[1]))
        sw = np.diff(stats.beta.cdf(sb, *sigma_prior))
        K, S = np.meshgrid(kmid, smid, indexing="ij")
        W = np.log(kw)[:, None] + np.log(sw)[None, :]
        return cls(K.ravel(), S.ravel(), W.ravel())

    @classmethod
    def single(cls, kappa, sigma):
        return cls(np.array([kappa]), np.array([sigma]), np.zeros(1))

    @classmethod
    def dirichlet(cls, n_kappa=10, kappa_max=15.0, kappa_prior=(2.0, 1.0)):
        """sigma = 0 only (PPM / DP cohesion) with the same kappa marginal."""
        kb = np.linspace(0.0, kappa_max, n_kappa + 1)
        kmid = 0.5 * (kb[1:] + kb[:-1])
        kw = np.diff(stats.gamma.cdf(kb, a=kappa_prior[0], scale=1.0 / kappa_prior[1]))
        return cls(kmid, np.zeros(n_kappa), np.log(kw))


def grid_log_posterior(sizes, grid: NGGPGrid, table: LogVTable | None = None) -> np.ndarray:
    """Normalised log posterior over grid points given cluster sizes."""
    table = table or _DEFAULT_TABLE
    sizes = np.asarray(sizes)
    n, C = int(sizes.sum()), int(sizes.size)
    lv = np.array([table(n, C, k, s) for k, s in zip(grid.kappa, grid.sigma)])
    lp = grid.log_weights + lv + log_cohesions(sizes, grid.sigma)
    return lp - logsumexp(lp)


def grid_update(partition, grid: NGGPGrid, rng, table: LogVTable | None = None) -> int:
    """Sample a grid index from p(kappa, sigma | partition). Returns the index;
    ``grid.kappa[i], grid.sigma[i]`` give the point."""
    if len(grid) == 1:
        return 0
    lp = grid_log_posterior(partition_sizes(partition), grid, table)
    return int(rng.choice(len(grid), p=np.exp(lp)))


# --------------------------------------------------------------------------
# sequential prior simulation


def new_cluster_log_ratios(n, kappa, sigma, table: LogVTable | None = None) -> np.ndarray:
    """R[m, C] = log V(m, C+1) - log V(m, C) for 1 <= C < m <= n."""
    tri = (table or _DEFAULT_TABLE).triangle(n, kappa, sigma)
    R = np.full_like(tri, -np.inf)
    with np.errstate(invalid="ignore"):
        R[:, :-1] = tri[:, 1:] - tri[:, :-1]
    R[~np.isfinite(R)] = -np.inf
    return R


def sample_prior_partition(n, kappa, sigma, rng, X=None, similarity=None,
                           table: LogVTable | None = None, vratio: bool = True) -> np.ndarray:
    """Draw a partition label vector by sequential allocation.

    Without covariates the draw is exact from the eppf. With ``X`` and a
    :class:`tppmx.similarity.SimilarityConfig` each unit's weights are
    multiplied by the similarity add-ratio (existing clusters) or the singleton
    similarity (new cluster). ``vratio=False`` drops the V ratio from the
    new-cluster weight, leaving the bare product form ``prod rho(S_j) g(x_j)``.
    """
    from . import _kernels
    from .similarity import SimilarityConfig

    if n < 1:
        raise ValueError("n must be >= 1")
    if n == 1:
        return np.zeros(1, dtype=np.int64)
    if vratio:
        R = new_cluster_log_ratios(n, kappa, sigma, table)
    else:
        R = np.zeros((n + 2, n + 2))
    if X is None or similarity is None or not similarity.enabled:
        Xa = np.zeros((n, 0))
        sim = SimilarityConfig(enabled=False)
    else:
        Xa = np.ascontiguousarray(X, dtype=float)
        sim = similarity
    return _kernels.sequential_prior(R, float(sigma), Xa, *sim.kernel_args(Xa.shape[1]), rng)
