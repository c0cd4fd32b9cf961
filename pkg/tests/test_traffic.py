import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from cachemodel import (PopularityModel, Traffic, explicit_popularity, hyperexp2_process, poisson_process,
                        zipf_popularity)
from cachemodel.traffic import process_age_cdf, process_cdf, process_mgf, sample_interarrival

rates = st.floats(min_value=1e-3, max_value=1e3)
localities = st.floats(min_value=1.0, max_value=50.0)


# -- popularity ----------------------------------------------------------

def test_zipf_alpha_zero_is_uniform():
    assert np.allclose(zipf_popularity(0.0, 4).probabilities, [0.25] * 4, rtol=0, atol=1e-15)


def test_zipf_alpha_one_three_objects():
    # normalisation 1 + 1/2 + 1/3 = 11/6
    assert np.allclose(zipf_popularity(1.0, 3).probabilities, [6 / 11, 3 / 11, 2 / 11], rtol=0, atol=1e-15)


def test_zipf_large_catalog_normalised():
    p = zipf_popularity(0.8, 10**6).probabilities
    assert abs(math.fsum(p) - 1.0) <= 1e-12


@given(st.floats(min_value=0.0, max_value=3.0), st.integers(min_value=1, max_value=5000))
def test_zipf_sorted_and_normalised(alpha, M):
    p = zipf_popularity(alpha, M).probabilities
    assert p.size == M
    assert abs(math.fsum(p) - 1.0) <= 1e-12
    assert np.all(np.diff(p) <= 0) and np.all(p >= 0)


@given(st.lists(st.floats(min_value=0.0, max_value=1e6), min_size=1, max_size=200).filter(lambda w: sum(w) > 0))
def test_explicit_popularity_sorts_and_normalises(weights):
    pop = explicit_popularity(weights)
    assert abs(math.fsum(pop.probabilities) - 1.0) <= 1e-12
    assert np.all(np.diff(pop.probabilities) <= 0)
    expected = np.sort(np.asarray(weights))[::-1] / math.fsum(weights)
    assert np.allclose(pop.probabilities, expected, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("bad", [[], [0.0, 0.0], [1.0, -1.0], [1.0, float("nan")]])
def test_explicit_popularity_rejects_bad_weights(bad):
    with pytest.raises(ValueError):
        explicit_popularity(bad)


def test_popularity_model_invariants_enforced():
    with pytest.raises(ValueError):
        PopularityModel(np.array([0.4, 0.6]))
    with pytest.raises(ValueError):
        PopularityModel(np.array([0.6, 0.3]))
    with pytest.raises(ValueError):
        zipf_popularity(-0.1, 10)
    with pytest.raises(ValueError):
        zipf_popularity(0.8, 0)


# -- request processes ---------------------------------------------------

def test_degenerate_hyperexp_is_exponential():
    proc = hyperexp2_process(2.0, 1.0)
    t = np.linspace(0, 5, 51)
    assert np.allclose(process_cdf(proc, t), 1 - np.exp(-2 * t), rtol=0, atol=1e-15)
    assert np.allclose(process_cdf(proc, t), process_cdf(poisson_process(2.0), t), rtol=0, atol=1e-15)


def test_hyperexp_branches():
    proc = hyperexp2_process(1.0, 10.0)
    assert proc.branch_prob == pytest.approx(10 / 11, abs=1e-15)
    assert proc.fast_rate == pytest.approx(10.0)
    assert proc.slow_rate == pytest.approx(0.1)
    p = proc.branch_prob
    assert p / 10.0 + (1 - p) * 10.0 == pytest.approx(1.0, abs=1e-14)


@pytest.mark.parametrize("rate,z", [(1.0, 1.0), (0.5, 4.0), (3.0, 10.0), (0.01, 25.0)])
def test_sampler_mean(rate, z):
    rng = np.random.default_rng(12345)
    x = sample_interarrival(hyperexp2_process(rate, z), rng, 10**6)
    assert abs(x.mean() * rate - 1.0) < 0.01


def test_sampler_reproducible():
    a = sample_interarrival(poisson_process(1.0), np.random.default_rng(7), 1000)
    b = sample_interarrival(poisson_process(1.0), np.random.default_rng(7), 1000)
    assert np.array_equal(a, b)


def test_sampler_matches_cdf():
    proc = hyperexp2_process(1.0, 10.0)
    x = sample_interarrival(proc, np.random.default_rng(99), 10**6)
    ks = stats.kstest(x, lambda t: process_cdf(proc, t)).statistic
    assert ks < 0.005


def test_high_locality_is_overdispersed():
    proc = hyperexp2_process(1.0, 10.0)
    p, a, b = proc.branch_prob, proc.fast_rate, proc.slow_rate
    second = 2 * (p / a**2 + (1 - p) / b**2)
    scv = second - 1.0  # mean is 1
    assert scv > 1
    x = sample_interarrival(proc, np.random.default_rng(3), 10**6)
    assert x.var() / x.mean() ** 2 > 1


def test_mgf_at_zero_is_one():
    for proc in (poisson_process(3.0), hyperexp2_process(0.2, 7.0)):
        assert process_mgf(proc, 0.0) == pytest.approx(1.0, abs=1e-15)


def test_poisson_age_cdf_equals_cdf():
    proc = poisson_process(0.7)
    t = np.linspace(0, 20, 101)
    assert np.allclose(process_age_cdf(proc, t), 1 - np.exp(-0.7 * t), rtol=0, atol=1e-15)


@pytest.mark.parametrize("t", [0.1, 1.0, 10.0])
def test_hyperexp_age_cdf_by_quadrature(t):
    proc = hyperexp2_process(1.0, 10.0)
    val, _ = integrate.quad(lambda u: 1 - process_cdf(proc, u), 0, t, epsabs=1e-13, epsrel=1e-13)
    assert process_age_cdf(proc, t) == pytest.approx(1.0 * val, abs=1e-8)


def test_mgf_pole_rejected():
    with pytest.raises(ValueError):
        process_mgf(hyperexp2_process(1.0, 4.0), 0.25)


@given(rates, localities)
def test_cdfs_are_distribution_functions(rate, z):
    proc = hyperexp2_process(rate, z)
    t = np.concatenate([[0.0], np.geomspace(1e-6, 1e6, 200) / rate])
    for F in (process_cdf(proc, t), process_age_cdf(proc, t)):
        assert F[0] == 0.0
        assert np.all(np.diff(F) >= -1e-15)
        assert np.all((F >= 0) & (F <= 1))
        assert F[-1] == pytest.approx(1.0, abs=1e-6)


@given(rates, localities)
def test_mean_interarrival_by_integration(rate, z):
    proc = hyperexp2_process(rate, z)
    # E[R] = integral of the survival function, split at the branch scales;
    # the survival is evaluated directly so the tail keeps full precision
    val = sum(integrate.quad(lambda u: float(proc.survival(u)), lo / rate, hi / rate,
                             epsabs=0, epsrel=1e-12, limit=200)[0]
              for lo, hi in [(0, 1), (1, 100), (100, 1e4)])
    val += integrate.quad(lambda u: float(proc.survival(u)), 1e4 / rate, np.inf, epsabs=0, epsrel=1e-12)[0]
    assert val * rate == pytest.approx(1.0, abs=1e-9)


@given(rates, localities)
def test_mean_from_mgf_derivative(rate, z):
    proc = hyperexp2_process(rate, z)
    h = 1e-5 * proc.slow_rate
    deriv = (process_mgf(proc, h) - process_mgf(proc, -h)) / (2 * h)
    assert deriv * rate == pytest.approx(1.0, abs=1e-6)


@given(rates, st.floats(min_value=1.0, max_value=20.0), st.floats(min_value=1.01, max_value=5.0))
def test_locality_raises_short_horizon_cdf(rate, z, factor):
    t = 1e-3 / rate
    low = process_cdf(hyperexp2_process(rate, z), t)
    high = process_cdf(hyperexp2_process(rate, z * factor), t)
    assert high >= low


def test_traffic_validation():
    with pytest.raises(ValueError):
        Traffic("irm", 2.0)
    with pytest.raises(ValueError):
        Traffic.hyperexp(0.5)
    with pytest.raises(ValueError):
        Traffic("pareto")
    assert Traffic.hyperexp(1.0).is_poisson
    assert Traffic.hyperexp(10).label() == "hyperexp(10)"
