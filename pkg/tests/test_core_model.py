import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import gammaln

from tppmx.core_model import (ArmData, CohortData, DataValidationError, UtilityWeights,
                              augmented_loglik_unit, log_linear_gamma, marginal_response_logpmf,
                              sample_d, sample_u)

pos = st.floats(0.05, 20.0)


def test_log_linear_gamma_identity():
    assert np.allclose(log_linear_gamma(np.zeros(3), np.zeros((2, 3)), [0.4, -1.0]), 1.0)


def test_log_linear_gamma_logs():
    g = log_linear_gamma([math.log(2), 0.0, -math.log(2)], np.zeros((1, 3)), [3.0])
    assert np.allclose(g, [2.0, 1.0, 0.5], rtol=1e-14)


def test_log_linear_gamma_hand_case():
    g = log_linear_gamma([0.3, -0.1], [[0.5, -0.2]], [2.0])
    assert np.allclose(g, [math.exp(1.3), math.exp(-0.5)], rtol=1e-14)


def test_log_linear_gamma_cap_clips():
    g = log_linear_gamma([80.0, -80.0], np.zeros((1, 2)), [0.0], cap=50.0)
    assert np.allclose(np.log(g), [50.0, -50.0])


def test_marginal_logpmf_examples():
    assert marginal_response_logpmf(2, [1, 1, 1]) == pytest.approx(math.log(1 / 3), abs=1e-15)
    assert marginal_response_logpmf(1, [2, 1, 1]) == pytest.approx(math.log(0.5), abs=1e-15)
    assert marginal_response_logpmf(3, [0.3, 0.7, 2.0]) == pytest.approx(math.log(2 / 3), abs=1e-15)


def test_marginal_logpmf_dirichlet_multinomial_mc():
    rng = np.random.default_rng(5)
    g = np.array([0.3, 0.7, 2.0])
    pi = rng.dirichlet(g, size=200_000)
    y = (pi.cumsum(axis=1) < rng.random(pi.shape[0])[:, None]).sum(axis=1)
    freq = np.mean(y == 2)
    se = math.sqrt(freq * (1 - freq) / y.size)
    assert abs(freq - math.exp(marginal_response_logpmf(3, g))) < 3 * se


@given(st.lists(pos, min_size=2, max_size=6), st.floats(0.01, 100.0))
def test_marginal_logpmf_normalised_and_scale_free(g, c):
    g = np.array(g)
    p = [math.exp(marginal_response_logpmf(k + 1, g)) for k in range(g.size)]
    assert sum(p) == pytest.approx(1.0, abs=1e-12)
    for k in range(g.size):
        assert marginal_response_logpmf(k + 1, c * g) == pytest.approx(
            marginal_response_logpmf(k + 1, g), abs=1e-12)


def test_augmented_loglik_examples():
    assert augmented_loglik_unit(1, [1.0], 0.0, [1.0]) == pytest.approx(-1.0)
    assert augmented_loglik_unit(2, [1, 1, 1], 0.0, [1, 1, 1]) == pytest.approx(-3.0)
    assert augmented_loglik_unit(1, [0.0, 1.0], 0.0, [1, 1]) == -math.inf


def test_augmented_loglik_independent_oracle():
    y, d, u, g = 2, np.array([0.4, 2.5, 1.1]), 0.7, np.array([0.5, 3.0, 1.2])
    ref = math.log(d[1])
    for k in range(3):
        ref += (g[k] - 1) * math.log(d[k]) - d[k] * (1 + u) - float(gammaln(g[k]))
    assert augmented_loglik_unit(y, d, u, g) == pytest.approx(ref, abs=1e-12)


@given(st.lists(pos, min_size=2, max_size=4), st.floats(0.0, 5.0), st.floats(0.01, 5.0))
def test_augmented_loglik_decreasing_in_u(g, u, du):
    d = np.linspace(0.5, 2.0, len(g))
    assert augmented_loglik_unit(1, d, u + du, g) < augmented_loglik_unit(1, d, u, g)


def test_sample_d_mean():
    rng = np.random.default_rng(1)
    D = np.array([sample_d(1, [1.0, 1.0, 1.0], 0.0, rng) for _ in range(100_000)])
    assert np.all(D > 0)
    se = D.std(axis=0) / math.sqrt(D.shape[0])
    assert np.all(np.abs(D.mean(axis=0) - [2.0, 1.0, 1.0]) < 3 * se)


def test_sample_d_large_u_shrinks():
    rng = np.random.default_rng(2)
    D = np.array([sample_d(1, [1.0, 1.0], 1e6, rng) for _ in range(1000)])
    assert D.mean() < 1e-5


def test_sample_u_mean():
    rng = np.random.default_rng(3)
    u = np.array([sample_u(4.0, rng) for _ in range(100_000)])
    assert np.all(u > 0)
    assert abs(u.mean() - 0.25) < 3 * u.std() / math.sqrt(u.size)
    with pytest.raises(ValueError):
        sample_u(0.0, rng)


def test_cohort_validation():
    ok = ArmData(np.array([1, 2]), np.zeros((2, 1)), np.zeros((2, 1)))
    with pytest.raises(DataValidationError, match="outside"):
        CohortData((ArmData(np.array([1, 4]), np.zeros((2, 1)), np.zeros((2, 1))),), 3)
    with pytest.raises(DataValidationError, match="non-finite"):
        CohortData((ArmData(np.array([1, 2]), np.zeros((2, 1)), np.array([[0.0], [np.nan]])),), 3)
    with pytest.raises(DataValidationError, match="same P and Q"):
        CohortData((ok, ArmData(np.array([1]), np.zeros((1, 2)), np.zeros((1, 1)))), 3)
    co = CohortData((ok, ok), 3)
    assert (co.T, co.P, co.Q, co.n) == (2, 1, 1, 4)
    with pytest.raises(ValueError):
        co.arms[0].y[0] = 2


def test_utility_weights():
    assert UtilityWeights([0, 40, 100]).K == 3
    with pytest.raises(ValueError):
        UtilityWeights([0, 50, 40])
