"""Acceptance criteria, one test (and one printed verdict line) each.

Run alone with ``pytest tests/test_acceptance.py -v``; the verdict lines are
listed in the "acceptance criteria" section of the terminal summary. Criteria
that cannot be met are marked xfail with the reason; their verdict line still
reads FAIL.
"""
import json
import math
import os
import time

import numpy as np
import pytest
from scipy.special import logsumexp

from geweke_harness import (SUMMARY_NAMES, marginal_draws, paired_z, replicated_draws,
                            toy_config, toy_design, two_sample_z)
from tppmx import _kernels
from tppmx.cli import main
from tppmx.mcmc import MCMCConfig, run_chain
from tppmx.partition_prior import (LogVTable, NGGPGrid, dp_log_V, eppf_logprob,
                                   set_partitions)
from tppmx.partition_summary import (adjusted_rand_index, point_estimate_partition,
                                     vi_distance)
from tppmx.prediction import predict_patients
from tppmx.similarity import ClusterCovariateStats, double_dipper_log_similarity
from tppmx.synthetic import (ScenarioSpec, generate_scenario, metric_esm, metric_mot,
                             metric_npc, metric_pct_delta_mtu, run_prior_simulation)

pytestmark = pytest.mark.slow


# --------------------------------------------------------------------------
# 1. prior cluster-count table

PRIOR_TARGETS = {  # mean clusters, tolerance, singleton %, tolerance (percentage points)
    "DP": (25.09, 1.5, 55.82, 8.0),
    "NGGP": (26.25, 2.0, 34.45, 8.0),
    "NGGP-nocal": (4.32, 1.5, 9.98, 8.0),
    "NGGP-sim": (4.38, 1.5, 19.39, 8.0),
}


@pytest.fixture(scope="module")
def prior_table():
    t = time.perf_counter()
    rows = run_prior_simulation(reps=10_000, n=50, seed=0)
    return {r["config"]: r for r in rows}, time.perf_counter() - t


def _prior_checks(table):
    out = {}
    for name, (mc, tol_c, sp, tol_s) in PRIOR_TARGETS.items():
        r = table[name]
        out[name] = (abs(r["mean_clusters"] - mc) <= tol_c, abs(r["singleton_pct"] - sp) <= tol_s,
                     r["mean_clusters"], r["singleton_pct"])
    return out


@pytest.mark.xfail(strict=True, reason=(
    "singleton shares of the NGGP rows: the exact prior at kappa = sigma = 0.7353 puts about "
    "74.6% of clusters (37.9% of units) in singletons, while the target is 34.45%; no single "
    "definition of the share reproduces both the DP and NGGP targets. NGGP-sim is also off "
    "(34.8% vs 19.39%). Mean cluster counts all match."))
def test_01_prior_simulation(prior_table, criterion):
    table, secs = prior_table
    checks = _prior_checks(table)
    ok = all(c and s for c, s, _, _ in checks.values()) and secs < 300
    parts = "; ".join(f"{k} C={m:.2f}{'' if c else '(x)'} single={p:.1f}%{'' if s else '(x)'}"
                      for k, (c, s, m, p) in checks.items())
    criterion(1, ok, f"prior-sim 10^4 reps in {secs:.0f}s: {parts}")
    assert ok


def test_01_prior_simulation_attained_parts(prior_table):
    table, secs = prior_table
    checks = _prior_checks(table)
    assert secs < 300
    assert all(c for c, _, _, _ in checks.values())
    assert checks["DP"][1] and checks["NGGP-nocal"][1]


# --------------------------------------------------------------------------
# 2. V function


@pytest.fixture(scope="module")
def v_checks():
    grid = NGGPGrid.default()
    table = LogVTable()
    worst_rec = 0.0
    for kappa, sigma in grid.points:
        for n in range(1, 51):
            for C in range(1, n + 1):
                lhs = table(n, C, kappa, sigma)
                rhs = np.logaddexp(table(n + 1, C, kappa, sigma) + math.log(n - sigma * C),
                                   table(n + 1, C + 1, kappa, sigma))
                worst_rec = max(worst_rec, abs(math.expm1(lhs - rhs)))
    lit, ext, cells = [], [], 0
    for kappa in np.unique(grid.kappa):
        for n in range(1, 51):
            for C in range(1, n + 1):
                a = table(n, C, kappa, 1e-8)
                b = table(n, C, kappa, 2e-8)
                dp = dp_log_V(n, C, kappa)
                lit.append(abs(a - dp))
                # linear extrapolation to sigma = 0 removes the O(sigma) term
                ext.append(abs(2 * a - b - dp))
                cells += 1
    return worst_rec, np.array(lit), np.array(ext)


@pytest.mark.xfail(strict=True, reason=(
    "at sigma = 1e-8 the exact log V differs from the DP value by sigma * d(log V)/d(sigma), "
    "which reaches 2.4e-6 for small kappa and n, C near 50; the quadrature is correct there "
    "(two-point extrapolation to sigma = 0 matches the DP closed form to 1e-12)"))
def test_02_v_function(v_checks, criterion):
    worst_rec, lit, ext = v_checks
    ok = worst_rec < 1e-8 and lit.max() < 1e-6
    criterion(2, ok, f"recursion max rel err {worst_rec:.2e} (n<=50, 100 grid points); "
                     f"sigma=1e-8 vs DP max {lit.max():.2e}, {np.sum(lit >= 1e-6)}/{lit.size} "
                     f"cells over 1e-6; extrapolated sigma->0 max {ext.max():.1e}")
    assert ok


def test_02_v_function_attained_parts(v_checks):
    worst_rec, lit, ext = v_checks
    assert worst_rec < 1e-8
    assert ext.max() < 1e-10
    assert np.median(lit) < 1e-6


# --------------------------------------------------------------------------
# 3. eppf normalisation


def test_03_eppf_normalisation(criterion):
    grid = NGGPGrid.default()
    idx = np.random.default_rng(0).choice(len(grid), 5, replace=False)
    worst = 0.0
    for i in idx:
        k, s = grid.kappa[i], grid.sigma[i]
        for n in range(1, 7):
            total = math.exp(logsumexp([eppf_logprob(p, k, s) for p in set_partitions(n)]))
            worst = max(worst, abs(total - 1.0))
    ok = worst < 1e-6
    criterion(3, ok, f"eppf sums over all partitions n<=6 at 5 grid points: max |sum-1| = {worst:.1e}")
    assert ok


# --------------------------------------------------------------------------
# 4. augmentation marginalisation


def test_04_augmentation(criterion):
    rng = np.random.default_rng(0)
    N, sweeps = 100_000, 30
    worst = 0.0
    for r in range(10):
        g = np.exp(rng.normal(0.0, 1.0, 3))
        lin = np.tile(np.log(g), (N, 1))
        y = rng.integers(0, 3, N)
        logd, logu = np.zeros((N, 3)), np.zeros(N)
        counters = np.zeros(1, dtype=np.int64)
        krng = np.random.default_rng(r)
        for _ in range(sweeps):
            # (d, u) | y with the sampler's kernel, then y | d with P(y = k) proportional to d_k
            _kernels.update_latent(y, lin, logd, logu, 50.0, counters, krng)
            p = np.exp(logd - logd.max(axis=1, keepdims=True))
            p /= p.sum(axis=1, keepdims=True)
            y = np.minimum((p.cumsum(axis=1) < krng.random(N)[:, None]).sum(axis=1), 2)
        freq = np.bincount(y, minlength=3) / N
        e = g / g.sum()
        worst = max(worst, np.max(np.abs(freq - e) / np.sqrt(e * (1 - e) / N)))
    ok = worst < 3.0
    criterion(4, ok, f"augmented Gibbs y-frequencies vs gamma/sum(gamma), 10 gammas x 1e5: "
                     f"max |z| = {worst:.2f}")
    assert ok


# --------------------------------------------------------------------------
# 5. similarity vs quadrature


def test_05_similarity_quadrature(criterion):
    from test_similarity import nig_posterior, quad_marginal
    rng = np.random.default_rng(1)
    worst = 0.0
    for size in range(1, 5):
        for _ in range(3):
            x = rng.normal(0.0, 1.5, size)
            ref = quad_marginal(x, *nig_posterior(x))
            got = double_dipper_log_similarity(ClusterCovariateStats.from_data(x[:, None]))
            worst = max(worst, abs(got - ref))
    ok = worst < 1e-6
    criterion(5, ok, f"double-dipper closed form vs 2D quadrature, sizes 1-4: max abs err {worst:.1e}")
    assert ok


# --------------------------------------------------------------------------
# 6. joint-distribution test


def test_06_geweke(criterion):
    t = time.perf_counter()
    X, Z = toy_design()
    cfg = toy_config()
    end, start, smp = replicated_draws(4000, 30, X, Z, cfg)
    marg = marginal_draws(20_000, [ar.X for ar in smp.arms], cfg)
    z_marg = two_sample_z(end, marg)
    z_pair = paired_z(end, start)
    secs = time.perf_counter() - t
    worst = max(np.abs(z_marg).max(), np.abs(z_pair).max())
    ok = worst < 4.0 and secs < 600
    j = int(np.argmax(np.maximum(np.abs(z_marg), np.abs(z_pair))))
    criterion(6, ok, f"toy joint test, 4000 chains x 30 sweeps from exact draws, "
                     f"{len(SUMMARY_NAMES)} functionals: max |z| = {worst:.2f} ({SUMMARY_NAMES[j]}), "
                     f"{secs:.0f}s")
    assert ok


# --------------------------------------------------------------------------
# 7-9. scenario studies


def test_07_s1_clustering(criterion):
    from tppmx.similarity import SimilarityConfig
    ari, secs = [], []
    for seed in range(10):
        d = generate_scenario(ScenarioSpec("s1", seed=seed))
        t = time.perf_counter()
        tr = run_chain(d.cohort(), MCMCConfig(seed=seed, similarity=SimilarityConfig(standardize=False)))
        secs.append(time.perf_counter() - t)
        ari.append([adjusted_rand_index(point_estimate_partition(tr.labels[a]), d.true_partition(a + 1))
                    for a in range(2)])
    m = np.mean(ari, axis=0)
    ok = bool(np.all(m >= 0.85)) and max(secs) < 180
    criterion(7, ok, f"S1, 10 fits: mean ARI arm1 {m[0]:.3f}, arm2 {m[1]:.3f}; "
                     f"max {max(secs):.0f}s per fit")
    assert ok


def _scenario_mtu(scenario, seeds, config_kw):
    mot, mtu = [], []
    for seed in seeds:
        d = generate_scenario(ScenarioSpec(scenario, seed=seed))
        te = ~d.train
        tr = run_chain(d.cohort(), MCMCConfig(seed=seed, **config_kw))
        r = predict_patients(tr, d.X[te], d.Z[te], d.spec.omega, np.random.default_rng(seed))
        mot.append(metric_mot(r["recommended"], d.optimal[te]))
        mtu.append(metric_pct_delta_mtu(r["recommended"], d.optimal[te], d.utility[te]))
    return np.array(mot), np.array(mtu)


def test_08_s2_ppmx_vs_ppm(criterion):
    from tppmx.similarity import SimilarityConfig
    _, full = _scenario_mtu("s2", range(10), {})
    _, ppm = _scenario_mtu("s2", range(10), dict(similarity=SimilarityConfig(enabled=False),
                                                  grid=NGGPGrid.dirichlet()))
    ok = full.mean() > ppm.mean() and full.mean() >= 0.5
    criterion(8, ok, f"S2, 10 replicates: mean %dMTU full {full.mean():.4f} vs PPM {ppm.mean():.4f}")
    assert ok


def test_09_cr_logistic(criterion):
    mot, mtu = _scenario_mtu("cr-logistic", range(20), {})
    ok = mtu.mean() > 0 and mot.mean() < 14
    criterion(9, ok, f"cr-logistic Q=25, 124/28 split, 20 replicates: mean %dMTU {mtu.mean():.4f}, "
                     f"mean MOT {mot.mean():.2f} of 28")
    assert ok


# --------------------------------------------------------------------------
# 10. metric fixtures


def test_10_metric_fixtures(criterion):
    U = np.array([[10.0, 20.0], [50.0, 20.0]])
    checks = {
        "MOT 2 of 5": metric_mot([1, 2, 2, 1, 1], [1, 1, 2, 2, 1]) == 2,
        "MOT none": metric_mot([1, 2], [1, 2]) == 0,
        "%dMTU +1": metric_pct_delta_mtu([2, 1], [2, 1], U) == 1.0,
        "%dMTU -1": metric_pct_delta_mtu([1, 2], [2, 1], U) == -1.0,
        "%dMTU mixed": abs(metric_pct_delta_mtu([2, 2], [2, 1], U) + 0.5) <= 1e-12,
        "NPC 3/7": metric_npc([1, 2, 3, 1, 2, 3, 1], [1, 2, 3, 2, 3, 1, 3]) == 3,
        "ESM oracle": abs(metric_esm(np.tile([0.0, 1.0], 10), np.tile([1, 2], 10), np.full(20, 2))
                          - 0.5) <= 1e-12,
        "ESM 8 patients": abs(metric_esm([1, 0, 1, 1, 1, 1, 0, 0], [1, 1, 1, 1, 2, 2, 2, 2],
                                         [1, 1, 2, 2, 2, 2, 1, 1]) - 0.125) <= 1e-12,
        "ARI": abs(adjusted_rand_index([1, 1, 2, 2], [1, 2, 1, 2]) + 0.5) <= 1e-12,
        "VI": abs(vi_distance([0, 0, 0, 0], [0, 1, 2, 3]) - math.log(4)) <= 1e-12,
    }
    ok = all(checks.values())
    bad = [k for k, v in checks.items() if not v]
    criterion(10, ok, f"{len(checks)} metric fixtures, failures: {bad or 'none'}")
    assert ok


# --------------------------------------------------------------------------
# 11. determinism


def _files(root):
    out = {}
    for dirpath, _, names in os.walk(root):
        for name in names:
            path = os.path.join(dirpath, name)
            with open(path, "rb") as fh:
                out[os.path.relpath(path, root)] = fh.read()
    return out


def test_11_determinism(tmp_path, criterion):
    sim = tmp_path / "sim"
    assert main(["simulate", "--scenario", "s1", "--seed", "2", "--out", str(sim)]) == 0
    fits, recs = [], []
    out = tmp_path / "fit"
    for name in ("a", "b"):
        # identical command lines, so the echoed output path matches too
        assert main(["fit", "--train", str(sim / "train.csv"), "--out", str(out), "--seed", "8",
                     "--chains", "2", "--iterations", "3000", "--burnin", "1000", "--thin", "5"]) == 0
        rec = tmp_path / "rec.csv"
        assert main(["predict", "--trace", str(out), "--newdata", str(sim / "test.csv"),
                     "--out", str(rec), "--seed", "3"]) == 0
        files = _files(out)
        # wall-clock fields are the only intended difference
        for key in [k for k in files if k.endswith("meta.json") or k == "report.json"]:
            d = json.loads(files[key])
            d.pop("runtime_s", None)
            files[key] = json.dumps(d, sort_keys=True).encode()
        fits.append(files)
        recs.append(rec.read_bytes())
        out.rename(tmp_path / f"fit_{name}")
        rec.rename(tmp_path / f"rec_{name}.csv")
    same_traces = fits[0] == fits[1]
    same_recs = recs[0] == recs[1]
    ok = same_traces and same_recs
    criterion(11, ok, f"two runs, same seed and config: {len(fits[0])} trace/report files identical "
                      f"= {same_traces}, recommendation CSV identical = {same_recs}")
    assert ok
