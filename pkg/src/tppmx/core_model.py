"""Domain types and the Dirichlet-multinomial likelihood with its log-linear
prognostic predictor, plus the Gamma data augmentation used by the sampler.

Responses are stored 1-based (levels ``1..K``) on the public types. Arrays
handed to the sampler kernels are converted to 0-based once, at fit time.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

logger = logging.getLogger(__name__)

#: Default bound on ``|log gamma|`` before capping.
EXPONENT_CAP = 50.0


class DataValidationError(ValueError):
    """Raised when cohort data violate the ingestion invariants."""


@dataclass(frozen=True)
class ArmData:
    """Observations for one treatment arm."""

    y: np.ndarray
    Z: np.ndarray
    X: np.ndarray
    ids: tuple = ()

    @property
    def n(self) -> int:
        return int(self.y.shape[0])


@dataclass(frozen=True)
class CohortData:
    """Per-arm responses, prognostic matrix ``Z`` (n x P) and predictive
    matrix ``X`` (n x Q). Immutable after construction."""

    arms: tuple
    K: int

    def __post_init__(self):
        if len(self.arms) == 0:
            raise DataValidationError("at least one arm is required")
        arms = []
        P = Q = None
        for a, arm in enumerate(self.arms):
            y = np.asarray(arm.y)
            if y.ndim != 1:
                raise DataValidationError(f"arm {a + 1}: responses must be a vector")
            if not np.issubdtype(y.dtype, np.integer):
                if not np.all(np.isfinite(y)) or not np.all(y == np.round(y)):
                    raise DataValidationError(f"arm {a + 1}: responses must be integer levels")
            y = y.astype(np.int64)
            n = y.shape[0]
            Z = np.asarray(arm.Z, dtype=float).reshape(n, -1)
            X = np.asarray(arm.X, dtype=float).reshape(n, -1)
            if np.any((y < 1) | (y > self.K)):
                bad = int(np.flatnonzero((y < 1) | (y > self.K))[0])
                raise DataValidationError(
                    f"arm {a + 1}, row {bad + 1}: response {y[bad]} outside 1..{self.K}")
            for name, M in (("Z", Z), ("X", X)):
                if not np.all(np.isfinite(M)):
                    r, c = np.argwhere(~np.isfinite(M))[0]
                    raise DataValidationError(
                        f"arm {a + 1}, row {r + 1}, {name} column {c + 1}: non-finite value")
            if P is None:
                P, Q = Z.shape[1], X.shape[1]
            elif Z.shape[1] != P or X.shape[1] != Q:
                raise DataValidationError("all arms must share the same P and Q")
            ids = tuple(arm.ids) if len(arm.ids) else tuple(f"a{a + 1}_{i + 1}" for i in range(n))
            if len(ids) != n:
                raise DataValidationError(f"arm {a + 1}: {len(ids)} ids for {n} rows")
            for M in (y, Z, X):
                M.setflags(write=False)
            arms.append(ArmData(y=y, Z=Z, X=X, ids=ids))
        object.__setattr__(self, "arms", tuple(arms))

    @property
    def T(self) -> int:
        return len(self.arms)

    @property
    def P(self) -> int:
        return self.arms[0].Z.shape[1]

    @property
    def Q(self) -> int:
        return self.arms[0].X.shape[1]

    @property
    def n(self) -> int:
        return sum(arm.n for arm in self.arms)


@dataclass(frozen=True)
class UtilityWeights:
    """Utilities attached to the ordinal response levels (0..100 scale)."""

    omega: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.omega, dtype=float)
        if w.ndim != 1 or w.size < 2:
            raise ValueError("omega must be a vector with at least two levels")
        if np.any(np.diff(w) < 0):
            raise ValueError("omega must be nondecreasing in the response level")
        if w[0] != 0.0 or w[-1] != 100.0:
            logger.warning("omega does not follow the 0..100 convention: %s", w)
        object.__setattr__(self, "omega", w)

    @property
    def K(self) -> int:
        return self.omega.size


@dataclass
class PartitionState:
    """Clustering of one arm.

    ``labels`` are 0-based cluster indices ``0..C-1`` (gapless). Rows
    ``0..C-1`` of ``eta`` hold the occupied-cluster effects; ``standby``
    holds the ``M`` auxiliary effects used by the Reuse strategy.
    ``xsum``/``xsq`` are per-cluster covariate sufficient statistics.
    """

    labels: np.ndarray
    sizes: np.ndarray
    C: int
    eta: np.ndarray
    standby: np.ndarray
    xsum: np.ndarray
    xsq: np.ndarray

    @classmethod
    def from_labels(cls, labels, eta, standby, X):
        labels = np.asarray(labels, dtype=np.int64)
        n = labels.size
        C = int(labels.max()) + 1
        K = eta.shape[1]
        Q = X.shape[1]
        sizes = np.zeros(n, dtype=np.int64)
        full_eta = np.zeros((n, K))
        full_eta[:C] = eta[:C]
        xsum = np.zeros((n, Q))
        xsq = np.zeros((n, Q))
        np.add.at(sizes, labels, 1)
        np.add.at(xsum, labels, X)
        np.add.at(xsq, labels, X * X)
        state = cls(labels=labels.copy(), sizes=sizes, C=C, eta=full_eta,
                    standby=np.array(standby, dtype=float), xsum=xsum, xsq=xsq)
        state.check()
        return state

    @property
    def cluster_eta(self) -> np.ndarray:
        return self.eta[: self.C]

    def check(self):
        """Audit gaplessness and size bookkeeping; raises AssertionError."""
        C = self.C
        assert C >= 1
        counts = np.bincount(self.labels, minlength=C)
        assert counts.size == C, "labels exceed cluster count"
        assert np.all(counts > 0), "labels are not gapless"
        assert np.array_equal(counts, self.sizes[:C]), "size bookkeeping mismatch"
        assert np.all(self.sizes[C:] == 0)


@dataclass
class ModelState:
    """Non-partition parameters of one chain."""

    beta: np.ndarray          # P x K
    lam: np.ndarray           # P x K local scales
    tau: np.ndarray           # K global scales
    theta: list               # per arm K-vector
    Lam: list                 # per arm K x K precision
    grid_index: list          # per arm index into the NGGP grid
    logd: list                # per arm n^a x K, log of the latent gammas
    u: list                   # per arm n^a
    warnings: dict = field(default_factory=lambda: {"exponent_cap": 0, "wishart_jitter": 0})

    @property
    def d(self) -> list:
        return [np.exp(ld) for ld in self.logd]


def log_linear_gamma(eta, beta, z, cap: float = EXPONENT_CAP):
    """Dirichlet concentrations ``exp(eta + z @ beta)``.

    ``z`` may be a single P-vector or an (n, P) matrix. Exponents larger in
    magnitude than ``cap`` are clipped and a warning is logged.
    """
    eta = np.asarray(eta, dtype=float)
    beta = np.asarray(beta, dtype=float)
    z = np.asarray(z, dtype=float)
    if beta.size == 0:
        lin = eta + np.zeros(z.shape[:-1] + (eta.shape[-1],))
    else:
        lin = eta + z @ beta
    if np.any(np.abs(lin) > cap):
        logger.warning("log-linear exponent exceeded cap %.0f; clipping", cap)
        lin = np.clip(lin, -cap, cap)
    return np.exp(lin)


def marginal_response_logpmf(y: int, gamma) -> float:
    """log P(y | gamma) with the Dirichlet probabilities integrated out.

    For one multinomial trial this is ``log(gamma_y / sum(gamma))``; ``y`` is
    the 1-based level.
    """
    gamma = np.asarray(gamma, dtype=float)
    return float(np.log(gamma[y - 1]) - np.log(gamma.sum()))


def augmented_loglik_unit(y: int, d, u: float, gamma) -> float:
    """Log joint density of one unit under the Gamma augmentation,
    up to terms free of (d, u, gamma)."""
    d = np.asarray(d, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    if np.any(d <= 0):
        return -math.inf
    logd = np.log(d)
    return float(logd[y - 1] + np.sum((gamma - 1.0) * logd - d * (u + 1.0) - gammaln(gamma)))


def sample_log_gamma(shape, rng, size=None):
    """log of Gamma(shape, 1) draws, stable for shapes far below one."""
    shape = np.asarray(shape, dtype=float)
    size = shape.shape if size is None else size
    small = shape < 1.0
    g = rng.standard_gamma(np.where(small, shape + 1.0, shape), size=size)
    out = np.log(g)
    if np.any(small):
        # Gamma(a) = Gamma(a + 1) * U**(1/a)
        logu = np.log(rng.random(size=size))
        out = np.where(small, out + logu / np.where(small, shape, 1.0), out)
    return out


def sample_d(y: int, gamma, u: float, rng) -> np.ndarray:
    """Draw the latent gammas of one unit from their full conditional."""
    gamma = np.asarray(gamma, dtype=float)
    shape = gamma.copy()
    shape[y - 1] += 1.0
    return np.exp(sample_log_gamma(shape, rng)) / (u + 1.0)


def sample_u(D: float, rng) -> float:
    """Exponential auxiliary with mean ``1/D``."""
    if D <= 0:
        raise ValueError("D must be positive")
    return float(rng.exponential(1.0 / D))
