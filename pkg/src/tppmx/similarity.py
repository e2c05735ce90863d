"""Double-Dipper covariate similarity under a Normal/Inverse-Gamma auxiliary
model, with the 1/sqrt(Q) coarsening.

Auxiliary model per covariate: ``x | m, v ~ N(m, v)``, ``m | v ~ N(m0, v/k0)``,
``v ~ InvGamma(shape=v0, scale=n0)``. Everything is computed from the
sufficient statistics (count, sum, sum of squares) of the cluster members.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

LOG_2PI = math.log(2.0 * math.pi)

GAUSSIAN = 0
BERNOULLI = 1


@dataclass(frozen=True)
class NIGParams:
    m0: float = 0.0
    k0: float = 1.0
    v0: float = 1.0
    n0: float = 2.0

    def __post_init__(self):
        if min(self.k0, self.v0, self.n0) <= 0:
            raise ValueError("k0, v0 and n0 must be positive")


@dataclass
class ClusterCovariateStats:
    """Count, sum and sum of squares per covariate for one cluster."""

    count: int
    sum: np.ndarray
    sumsq: np.ndarray

    @classmethod
    def empty(cls, Q):
        return cls(0, np.zeros(Q), np.zeros(Q))

    @classmethod
    def from_data(cls, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return cls(X.shape[0], X.sum(axis=0), (X * X).sum(axis=0))

    def add(self, x):
        x = np.asarray(x, dtype=float)
        return ClusterCovariateStats(self.count + 1, self.sum + x, self.sumsq + x * x)

    def remove(self, x):
        x = np.asarray(x, dtype=float)
        if self.count == 0:
            raise ValueError("cannot remove from an empty cluster")
        return ClusterCovariateStats(self.count - 1, self.sum - x, self.sumsq - x * x)


@numba.njit(cache=True)
def _nig_logml(cnt, s, ss, m0, k0, a0, b0):
    if cnt == 0:
        return 0.0
    xbar = s / cnt
    S = ss - s * xbar
    if S < 0.0:
        S = 0.0
    kn = k0 + cnt
    an = a0 + 0.5 * cnt
    bn = b0 + 0.5 * S + 0.5 * k0 * cnt * (xbar - m0) ** 2 / kn
    return (-0.5 * cnt * LOG_2PI + 0.5 * math.log(k0 / kn) + a0 * math.log(b0)
            - an * math.log(bn) + math.lgamma(an) - math.lgamma(a0))


@numba.njit(cache=True)
def _nig_dd(cnt, s, ss, m0, k0, a0, b0):
    # marginal of the data under the NIG posterior given the same data
    if cnt == 0:
        return 0.0
    xbar = s / cnt
    S = ss - s * xbar
    if S < 0.0:
        S = 0.0
    kn = k0 + cnt
    an = a0 + 0.5 * cnt
    bn = b0 + 0.5 * S + 0.5 * k0 * cnt * (xbar - m0) ** 2 / kn
    mn = (k0 * m0 + s) / kn
    return _nig_logml(cnt, s, ss, mn, kn, an, bn)


@numba.njit(cache=True)
def _lbeta(a, b):
    return math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)


@numba.njit(cache=True)
def _bern_dd(cnt, s, a, b):
    if cnt == 0:
        return 0.0
    return _lbeta(a + 2.0 * s, b + 2.0 * (cnt - s)) - _lbeta(a + s, b + cnt - s)


@numba.njit(cache=True)
def cluster_log_similarity(cnt, xsum, xsq, kinds, params, scale):
    """Sum over covariates of the double-dipper log score, times ``scale``.

    ``params`` = (m0, k0, v0, n0, beta_a, beta_b)."""
    if cnt == 0:
        return 0.0
    tot = 0.0
    for q in range(xsum.shape[0]):
        if kinds[q] == BERNOULLI:
            tot += _bern_dd(cnt, xsum[q], params[4], params[5])
        else:
            tot += _nig_dd(cnt, xsum[q], xsq[q], params[0], params[1], params[2], params[3])
    return scale * tot


@numba.njit(cache=True)
def added_log_similarity(cnt, xsum, xsq, x, kinds, params, scale):
    """Log similarity of the cluster after adding the point ``x``."""
    tot = 0.0
    c1 = cnt + 1
    for q in range(xsum.shape[0]):
        s = xsum[q] + x[q]
        if kinds[q] == BERNOULLI:
            tot += _bern_dd(c1, s, params[4], params[5])
        else:
            tot += _nig_dd(c1, s, xsq[q] + x[q] * x[q], params[0], params[1], params[2], params[3])
    return scale * tot


# --------------------------------------------------------------------------
# public functions on ClusterCovariateStats


def nig_log_marginal(count, total, sumsq, nig: NIGParams = NIGParams()) -> float:
    """Closed-form log marginal likelihood of one covariate's cluster values
    under the NIG prior (single use of the data)."""
    return float(_nig_logml(int(count), float(total), float(sumsq), nig.m0, nig.k0, nig.v0, nig.n0))


def double_dipper_log_similarity(stats: ClusterCovariateStats, nig: NIGParams = NIGParams()) -> float:
    if stats.count == 0:
        return 0.0
    return float(sum(_nig_dd(stats.count, float(s), float(ss), nig.m0, nig.k0, nig.v0, nig.n0)
                     for s, ss in zip(stats.sum, stats.sumsq)))


def calibrated_log_similarity(stats: ClusterCovariateStats, nig: NIGParams = NIGParams(), Q=None) -> float:
    Q = len(stats.sum) if Q is None else Q
    if Q < 1:
        raise ValueError("Q must be >= 1")
    return double_dipper_log_similarity(stats, nig) / math.sqrt(Q)


def log_similarity_add_ratio(stats: ClusterCovariateStats, x, nig: NIGParams = NIGParams(),
                             Q=None, calibrated: bool = True) -> float:
    """log g(stats + {x}) - log g(stats) from sufficient statistics."""
    x = np.asarray(x, dtype=float)
    Q = x.size if Q is None else Q
    scale = 1.0 / math.sqrt(Q) if calibrated else 1.0
    kinds = np.zeros(x.size, dtype=np.int64)
    params = np.array([nig.m0, nig.k0, nig.v0, nig.n0, 1.0, 1.0])
    new = added_log_similarity(stats.count, stats.sum, stats.sumsq, x, kinds, params, scale)
    old = cluster_log_similarity(stats.count, stats.sum, stats.sumsq, kinds, params, scale)
    return float(new - old)


# --------------------------------------------------------------------------
# configuration used by the sampler


@dataclass(frozen=True)
class SimilarityConfig:
    """How covariates enter the partition prior.

    ``binary`` selects the treatment of 0/1 columns: ``"gaussian"`` (default)
    scores them with the NIG model like any other column, ``"bernoulli"``
    uses a Beta(beta_a, beta_b)-Bernoulli double dipper for them instead.
    """

    enabled: bool = True
    calibrate: bool = True
    standardize: bool = True
    nig: NIGParams = field(default_factory=NIGParams)
    binary: str = "gaussian"
    beta_a: float = 1.0
    beta_b: float = 1.0

    def column_kinds(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        kinds = np.zeros(X.shape[1], dtype=np.int64)
        if self.binary == "bernoulli":
            for q in range(X.shape[1]):
                if np.all((X[:, q] == 0) | (X[:, q] == 1)):
                    kinds[q] = BERNOULLI
        elif self.binary != "gaussian":
            raise ValueError(f"unknown binary mode {self.binary!r}")
        return kinds

    def params(self) -> np.ndarray:
        n = self.nig
        return np.array([n.m0, n.k0, n.v0, n.n0, self.beta_a, self.beta_b])

    def scale(self, Q) -> float:
        if not self.enabled or Q == 0:
            return 0.0
        return 1.0 / math.sqrt(Q) if self.calibrate else 1.0

    def kernel_args(self, Q, kinds=None):
        if kinds is None:
            kinds = np.zeros(Q, dtype=np.int64)
        return (np.asarray(kinds, dtype=np.int64), self.params(), self.scale(Q))


@dataclass(frozen=True)
class Standardizer:
    """Column centring/scaling fitted on one training arm; Bernoulli-scored
    columns pass through unchanged."""

    mean: np.ndarray
    sd: np.ndarray

    @classmethod
    def fit(cls, X, kinds=None, enabled=True):
        X = np.asarray(X, dtype=float)
        Q = X.shape[1]
        mean = np.zeros(Q)
        sd = np.ones(Q)
        if enabled and X.shape[0] > 1:
            mean = X.mean(axis=0)
            sd = X.std(axis=0, ddof=1)
            sd[~(sd > 0)] = 1.0
            if kinds is not None:
                keep = np.asarray(kinds) == BERNOULLI
                mean[keep] = 0.0
                sd[keep] = 1.0
        return cls(mean, sd)

    def transform(self, X):
        return (np.asarray(X, dtype=float) - self.mean) / self.sd
