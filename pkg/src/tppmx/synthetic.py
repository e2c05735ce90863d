"""Synthetic covariates, continuation-ratio response generation and the
treatment-selection evaluation metrics."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .core_model import ArmData, CohortData

logger = logging.getLogger(__name__)

OMEGA_DEFAULT = np.array([0.0, 40.0, 100.0])


# --------------------------------------------------------------------------
# covariate generators


def gen_prior_sim_covariates(n=50, seed=None, rng=None):
    """Three-component mixture of 5-variate normals, returned with the
    component labels."""
    rng = rng if rng is not None else np.random.default_rng(seed)
    comp = rng.choice(3, size=n, p=[0.2, 0.5, 0.3])
    mu = np.array([-2.1, 0.0, 2.3])[comp]
    X = mu[:, None] + np.sqrt(0.5) * rng.standard_normal((n, 5))
    return X, comp


def gen_s1_covariates(seed=None, rng=None, sizes=(75, 75, 50)):
    """Two Gaussian and two binary covariates from three groups; returns
    (X, true group labels)."""
    rng = rng if rng is not None else np.random.default_rng(seed)
    means = np.array([[-3.0, 3.0], [0.0, 0.0], [3.0, 3.0]])
    q = np.array([0.1, 0.5, 0.9])
    labels = np.repeat(np.arange(3), sizes)
    n = labels.size
    X = np.empty((n, 4))
    X[:, :2] = means[labels] + np.sqrt(0.5) * rng.standard_normal((n, 2))
    X[:, 2:] = (rng.random((n, 2)) < q[labels][:, None]).astype(float)
    return X, labels


def gen_s2_s3_covariates(Q=10, n=200, seed=None, rng=None):
    """Equal fifths of columns from N(0,1), U(0,10), t4, SN(10,1,10) and
    0.4 N(0,1) + 0.6 N(10,2). Returns (X, mixture indicators of the last
    family, one column per mixture covariate)."""
    if Q % 5:
        raise ValueError("Q must be divisible by 5")
    rng = rng if rng is not None else np.random.default_rng(seed)
    f = Q // 5
    X = np.empty((n, Q))
    X[:, :f] = rng.standard_normal((n, f))
    X[:, f:2 * f] = rng.uniform(0.0, 10.0, (n, f))
    X[:, 2 * f:3 * f] = rng.standard_t(4, (n, f))
    X[:, 3 * f:4 * f] = stats.skewnorm.rvs(10.0, loc=10.0, scale=1.0, size=(n, f), random_state=rng)
    hi = rng.random((n, f)) < 0.6
    X[:, 4 * f:] = np.where(hi, 10.0 + np.sqrt(2.0) * rng.standard_normal((n, f)),
                            rng.standard_normal((n, f)))
    return X, hi.astype(np.int64)


def mixture_partition(indicators) -> np.ndarray:
    """Joint component membership across the mixture-family columns, as
    gapless labels."""
    ind = np.asarray(indicators)
    code = ind @ (2 ** np.arange(ind.shape[1]))
    return np.unique(code, return_inverse=True)[1]


# --------------------------------------------------------------------------
# response generator


@dataclass(frozen=True)
class ResponseCoefficients:
    """Continuation-ratio coefficients for K = 3; ``alpha``/``phi`` are per
    arm (T x 2), ``iota`` (2,) and ``chi`` (2 x P) are shared."""

    alpha: np.ndarray = field(default_factory=lambda: np.array([[-0.5, -1.0], [0.7, -1.0]]))
    phi: np.ndarray = field(default_factory=lambda: np.array([[1.5, 2.0], [-0.5, -1.0]]))
    iota: np.ndarray = field(default_factory=lambda: np.array([1.0, -0.5]))
    chi: np.ndarray = field(default_factory=lambda: np.array([[1.0, 0.5], [0.7, 1.0]]))

    @property
    def T(self) -> int:
        return np.asarray(self.alpha).shape[0]


def continuation_ratio_probs(logits) -> np.ndarray:
    """Category probabilities from continuation-ratio logits
    ``r_k = log P(y = k+1) / P(y <= k)``, k = 1..K-1. Works row-wise."""
    r = np.atleast_2d(np.asarray(logits, dtype=float))
    n, km1 = r.shape
    p = np.empty((n, km1 + 1))
    # P(y <= k+1) = P(y <= k) (1 + o_k); start from the top
    below = np.ones(n)
    for k in range(km1 - 1, -1, -1):
        sk = 1.0 / (1.0 + np.exp(r[:, k]))
        p[:, k + 1] = below * (1.0 - sk)
        below = below * sk
    p[:, 0] = below
    return p if np.ndim(logits) > 1 else p[0]


def log_continuation_ratio_probs(logits) -> np.ndarray:
    """Logarithm of :func:`continuation_ratio_probs`, stable for large logits."""
    r = np.atleast_2d(np.asarray(logits, dtype=float))
    n, km1 = r.shape
    lp = np.empty((n, km1 + 1))
    below = np.zeros(n)
    for k in range(km1 - 1, -1, -1):
        lp[:, k + 1] = below - np.logaddexp(0.0, -r[:, k])
        below = below - np.logaddexp(0.0, r[:, k])
    lp[:, 0] = below
    return lp if np.ndim(logits) > 1 else lp[0]


def pca_score(X_train, X_apply=None):
    """Standardised (PC1 + PC2)/sqrt(2) of the column-standardised training
    covariates, evaluated on ``X_apply`` (default: the training rows)."""
    X_train = np.asarray(X_train, dtype=float)
    X_apply = X_train if X_apply is None else np.asarray(X_apply, dtype=float)
    mu = X_train.mean(axis=0)
    sd = X_train.std(axis=0, ddof=1)
    sd[~(sd > 0)] = 1.0
    S = (X_train - mu) / sd
    _, _, Vt = np.linalg.svd(S, full_matrices=False)
    V = Vt[:2].T if Vt.shape[0] > 1 else np.c_[Vt[0], np.zeros(Vt.shape[1])]
    # fix the sign of each loading vector for reproducibility
    V = V * np.where(V[np.abs(V).argmax(axis=0), [0, 1]] < 0, -1.0, 1.0)
    comb = (S @ V).sum(axis=1) / np.sqrt(2.0)
    m, s = comb.mean(), comb.std(ddof=1)
    s = s if s > 0 else 1.0
    return (((X_apply - mu) / sd) @ V).sum(axis=1) / np.sqrt(2.0) / s - m / s


def true_orp(psi, Z, coef: ResponseCoefficients = ResponseCoefficients(),
             omega=OMEGA_DEFAULT, weight_by_omega: bool = True) -> np.ndarray:
    """True ordinal response probabilities, (n x T x K)."""
    psi = np.asarray(psi, dtype=float)
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    omega = np.asarray(omega, dtype=float)
    chi = np.asarray(coef.chi)
    lp_star = log_continuation_ratio_probs(coef.iota[None, :] + Z @ chi.T)
    out = np.empty((psi.size, coef.T, omega.size))
    with np.errstate(divide="ignore"):
        lw_omega = np.log(omega) if weight_by_omega else np.zeros(omega.size)
    for a in range(coef.T):
        lp = log_continuation_ratio_probs(coef.alpha[a][None, :] + np.outer(psi ** 3, coef.phi[a]))
        lw = lp + lp_star + lw_omega
        lw -= lw.max(axis=1, keepdims=True)
        w = np.exp(lw)
        out[:, a] = w / w.sum(axis=1, keepdims=True)
    return out


def optimal_arms(orp, omega=OMEGA_DEFAULT):
    """1-based argmax over arms of the true utility and a tie flag."""
    util = np.asarray(orp) @ np.asarray(omega, dtype=float)
    best = util.argmax(axis=1)
    tie = (util == util.max(axis=1, keepdims=True)).sum(axis=1) > 1
    return best + 1, tie, util


def gen_responses(psi, Z, arms, omega=OMEGA_DEFAULT, seed=None, rng=None,
                  coef: ResponseCoefficients = ResponseCoefficients(),
                  weight_by_omega: bool = True):
    """Draw each patient's response under the arm received. ``arms`` are
    1-based. Returns (y 1-based, ORP (n x T x K), optimal arm, tie flags)."""
    rng = rng if rng is not None else np.random.default_rng(seed)
    orp = true_orp(psi, Z, coef, omega, weight_by_omega)
    arms = np.asarray(arms, dtype=np.int64)
    p = orp[np.arange(arms.size), arms - 1]
    u = rng.random(arms.size)
    y = (u[:, None] > np.cumsum(p, axis=1)).sum(axis=1) + 1
    y = np.minimum(y, p.shape[1])
    opt, tie, _ = optimal_arms(orp, omega)
    return y, orp, opt, tie


# --------------------------------------------------------------------------
# scenarios


@dataclass(frozen=True)
class ScenarioSpec:
    scenario: str = "s1"
    n: int | None = None
    n_train: int | None = None
    Q: int | None = None
    P: int = 2
    T: int = 2
    overlap: float = 1.0
    seed: int = 0
    omega: tuple = (0.0, 40.0, 100.0)
    weight_by_omega: bool = True

    def resolved(self) -> "ScenarioSpec":
        defaults = {"s1": (200, 170, 4), "s2": (200, 170, 10), "s3": (200, 170, 20),
                    "cr-logistic": (152, 124, 25), "prior-sim": (50, 50, 5)}
        if self.scenario not in defaults:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        n, nt, Q = defaults[self.scenario]
        spec = ScenarioSpec(self.scenario, self.n or n, self.n_train or nt, self.Q or Q, self.P,
                            self.T, self.overlap, self.seed, tuple(self.omega),
                            self.weight_by_omega)
        if not 0 < spec.n_train <= spec.n:
            raise ValueError("need 0 < n_train <= n")
        if not 0.0 <= spec.overlap <= 1.0:
            raise ValueError("overlap must lie in [0, 1]")
        return spec


@dataclass
class GeneratedDataset:
    """All patients of one replicate. ``train`` marks the training rows;
    ``orp`` is (n x T x K); ``partition`` holds true cluster labels when the
    scenario defines them."""

    ids: np.ndarray
    arm: np.ndarray
    y: np.ndarray
    Z: np.ndarray
    X: np.ndarray
    train: np.ndarray
    orp: np.ndarray
    optimal: np.ndarray
    tie: np.ndarray
    utility: np.ndarray
    partition: np.ndarray | None
    spec: ScenarioSpec

    @property
    def K(self) -> int:
        return self.orp.shape[2]

    def cohort(self, rows=None) -> CohortData:
        rows = self.train if rows is None else rows
        arms = []
        for a in range(1, self.spec.T + 1):
            sel = rows & (self.arm == a)
            arms.append(ArmData(self.y[sel], self.Z[sel], self.X[sel], tuple(self.ids[sel])))
        return CohortData(tuple(arms), self.K)

    def true_partition(self, arm: int, rows=None):
        if self.partition is None:
            return None
        rows = self.train if rows is None else rows
        return self.partition[rows & (self.arm == arm)]


def _balanced_arms(n, T, rng):
    return rng.permutation(np.arange(n) % T) + 1


def generate_scenario(spec: ScenarioSpec) -> GeneratedDataset:
    spec = spec.resolved()
    ss = np.random.SeedSequence(spec.seed)
    r_cov, r_split, r_resp = [np.random.default_rng(s) for s in ss.spawn(3)]
    n, Q = spec.n, spec.Q
    extra = 0
    partition = None
    if spec.scenario == "s1":
        X, partition = gen_s1_covariates(rng=r_cov)
        if n != X.shape[0]:
            raise ValueError("scenario s1 has n = 200")
    elif spec.scenario in ("s2", "s3"):
        X, ind = gen_s2_s3_covariates(Q, n, rng=r_cov)
        partition = mixture_partition(ind)
    elif spec.scenario == "cr-logistic":
        extra = int(round((1.0 - spec.overlap) * Q))
        X, _ = gen_s2_s3_covariates(Q, n, rng=r_cov)
        if extra:
            pool, _ = gen_s2_s3_covariates(5 * -(-extra // 5), n, rng=r_cov)
            X = np.hstack([X, pool[:, :extra]])
    else:
        X, partition = gen_prior_sim_covariates(n, rng=r_cov)
    Z = r_cov.standard_normal((n, spec.P))
    order = r_split.permutation(n)
    train = np.zeros(n, dtype=bool)
    train[order[:spec.n_train]] = True
    arm = _balanced_arms(n, spec.T, r_split)
    if spec.T != 2:
        raise ValueError("the response generator is defined for two arms")

    Xm = X[:, :Q]
    psi = pca_score(Xm[train], Xm)
    if extra:
        # test responses come from a covariate set sharing only part of the columns
        Xt = Xm.copy()
        Xt[:, Q - extra:] = X[:, Q:Q + extra]
        psi[~train] = pca_score(Xm[train], Xt[~train])
    omega = np.asarray(spec.omega, dtype=float)
    y, orp, opt, tie = gen_responses(psi, Z, arm, omega, rng=r_resp,
                                     weight_by_omega=spec.weight_by_omega)
    ids = np.array([f"p{i + 1:04d}" for i in range(n)])
    return GeneratedDataset(ids=ids, arm=arm, y=y, Z=Z, X=Xm, train=train, orp=orp,
                            optimal=opt, tie=tie, utility=orp @ omega, partition=partition,
                            spec=spec)


# --------------------------------------------------------------------------
# metrics


def metric_mot(recommended, optimal) -> int:
    r, o = np.asarray(recommended), np.asarray(optimal)
    if r.shape != o.shape:
        raise ValueError("length mismatch")
    return int(np.sum(r != o))


def metric_pct_delta_mtu(recommended, optimal, utilities) -> float:
    """Signed share of the attainable utility gain; ``utilities`` is (n x 2).
    Returns nan when no patient has a utility gap."""
    r, o = np.asarray(recommended), np.asarray(optimal)
    U = np.asarray(utilities, dtype=float)
    if U.ndim != 2 or U.shape[1] != 2:
        raise ValueError("defined for two arms")
    gap = np.abs(U[:, 0] - U[:, 1])
    denom = gap.sum()
    if denom == 0:
        logger.warning("%%dMTU undefined: no utility difference between arms")
        return float("nan")
    delta = np.where(r == o, 1.0, -1.0)
    return float((delta * gap).sum() / denom)


def metric_npc(predicted, observed) -> int:
    p, o = np.asarray(predicted), np.asarray(observed)
    if p.shape != o.shape:
        raise ValueError("length mismatch")
    return int(np.sum(p == o))


def predicted_outcome(median_pi) -> np.ndarray:
    """1-based argmax of the median predictive probabilities."""
    return np.asarray(median_pi).argmax(axis=-1) + 1


def metric_esm(outcomes, received, recommended) -> float:
    """Response rate under the recommendation rule minus the observed rate.
    Arms coded 1/2, outcomes 0/1."""
    y = np.asarray(outcomes, dtype=float)
    rec = np.asarray(received)
    rcm = np.asarray(recommended)
    total = 0.0
    for a in (1, 2):
        agree = (rec == a) & (rcm == a)
        w = np.mean(rcm == a)
        if agree.any():
            total += y[agree].mean() * w
        elif w > 0:
            logger.warning("ESM: no patient recommended arm %d received it", a)
    return float(total - y.mean())


# --------------------------------------------------------------------------
# prior cluster-count experiment


@dataclass(frozen=True)
class PriorSimRow:
    """One prior configuration of the cluster-count experiment."""

    name: str
    kappa: float
    sigma: float
    similarity: bool
    calibrate: bool = True
    vratio: bool = True


PRIOR_SIM_ROWS = (
    PriorSimRow("DP", 19.2333, 0.0, False),
    PriorSimRow("DP-sim", 19.2333, 0.0, True, calibrate=True),
    PriorSimRow("NGGP", 0.7353, 0.7353, False),
    PriorSimRow("NGGP-nocal", 0.7353, 0.7353, True, calibrate=False, vratio=False),
    PriorSimRow("NGGP-sim", 0.7353, 0.7353, True, calibrate=True, vratio=False),
)


def run_prior_simulation(rows=PRIOR_SIM_ROWS, reps=5000, n=50, seed=0, table=None):
    """Mean cluster count, mean singleton share (percent of clusters) and the
    cluster-count histogram for each prior configuration.

    Covariate rows draw fresh mixture covariates per replicate and score them
    on the standardised scale."""
    from .partition_prior import sample_prior_partition
    from .similarity import SimilarityConfig, Standardizer

    out = []
    for r, row in enumerate(rows):
        rng = np.random.default_rng([seed, r])
        sim = SimilarityConfig(calibrate=row.calibrate) if row.similarity else None
        counts = np.zeros(reps, dtype=np.int64)
        share = np.zeros(reps)
        for i in range(reps):
            X = None
            if sim is not None:
                X, _ = gen_prior_sim_covariates(n, rng=rng)
                X = Standardizer.fit(X).transform(X)
            lab = sample_prior_partition(n, row.kappa, row.sigma, rng, X=X, similarity=sim,
                                         table=table, vratio=row.vratio)
            sizes = np.bincount(lab)
            counts[i] = sizes.size
            share[i] = np.mean(sizes == 1)
        out.append({"config": row.name, "kappa": row.kappa, "sigma": row.sigma,
                    "similarity": row.similarity, "calibrate": row.calibrate,
                    "vratio": row.vratio, "reps": reps,
                    "mean_clusters": float(counts.mean()),
                    "singleton_pct": float(100.0 * share.mean()),
                    "histogram": np.bincount(counts, minlength=n + 1)})
    return out
