import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special
from scipy.stats import norm

from twinmap.urllc import (
    RateDecision,
    erfinv,
    ideal_rate,
    meta_probability,
    normalized_rate,
    rate_select,
    rate_select_many,
    write_decisions_csv,
)


def test_erfinv_accuracy():
    y = np.linspace(-0.999, 0.999, 20001)
    np.testing.assert_allclose(erfinv(y), special.erfinv(y), rtol=0, atol=1e-10)
    assert erfinv(0.0) == 0.0
    with pytest.raises(ValueError):
        erfinv(1.0)


@pytest.mark.parametrize("mu", [-5.0, 0.0, 2.3])
@pytest.mark.parametrize("snr", [1.0, 1e3])
def test_median_reduction(mu, snr):
    d = rate_select(mu, 1.7, 0.5, snr)
    assert d.rate == pytest.approx(math.log2(1 + snr * math.exp(mu)), abs=1e-12)


def test_zero_sigma_independent_of_delta():
    rates = {rate_select(0.4, 0.0, d).rate for d in (0.01, 0.05, 0.3, 0.5, 0.9)}
    assert len(rates) == 1


def test_five_percent_value():
    d = rate_select(0.0, 1.0, 0.05)
    z = norm.ppf(0.05)
    assert z == pytest.approx(-1.6449, abs=1e-4)
    assert d.rate == pytest.approx(math.log2(1 + math.exp(z)), abs=1e-9)
    assert d.rate == pytest.approx(0.25464, abs=1e-5)
    assert isinstance(d, RateDecision) and d.delta == 0.05 and d.sigma == 1.0


@pytest.mark.parametrize("delta", [0.0, 1.0, -0.2, 1.3])
def test_delta_out_of_range(delta):
    with pytest.raises(ValueError):
        rate_select(0.0, 1.0, delta)


def test_negative_sigma():
    with pytest.raises(ValueError):
        rate_select(0.0, -1.0, 0.1)


def test_monotonicity_grid():
    mus = np.linspace(-6, 6, 25)
    sigmas = np.linspace(0, 3, 25)
    M, S = np.meshgrid(mus, sigmas, indexing="ij")
    R = rate_select_many(M, S, 0.05)
    assert np.all(np.diff(R, axis=0) > 0)   # increasing in mu
    assert np.all(np.diff(R, axis=1) < 0)   # decreasing in sigma for delta < 0.5
    assert np.all(R <= rate_select_many(M, 0.0, 0.05))


@settings(max_examples=300, deadline=None)
@given(mu=st.floats(-20, 20), sigma=st.floats(0, 5), delta=st.floats(1e-4, 0.4999))
def test_conservatism(mu, sigma, delta):
    r = rate_select(mu, sigma, delta).rate
    assert 0 <= r <= rate_select(mu, 0.0, delta).rate


def test_ideal_rate_examples():
    assert ideal_rate(np.full(50, 0.2), 0.05, 10.0) == pytest.approx(math.log2(3.0))
    x = np.random.default_rng(0).exponential(1.0, 1000)
    rates = [ideal_rate(x, e, 5.0) for e in (0.01, 0.05, 0.1, 0.5)]
    assert rates == sorted(rates)
    big = np.random.default_rng(1).exponential(1.0, 100_000)
    truth = math.log2(1 + 100 * -math.log(0.95))
    assert truth == pytest.approx(2.616, abs=1e-3)
    assert abs(ideal_rate(big, 0.05, 100.0) - truth) / truth < 0.03


def test_meta_probability_examples():
    q = np.random.default_rng(0).exponential(1.0, 40)
    assert meta_probability(np.zeros(40), q) == 0.0
    assert meta_probability(np.log2(1 + q) + 1.0, q) == 1.0
    # strict inequality: equality is not a violation
    assert meta_probability(np.log2(1 + q), q) == 0.0
    decisions = [rate_select(0.0, 0.0, 0.5, index=i) for i in range(3)]
    assert meta_probability(decisions, [0.5, 2.0, 1.0]) == pytest.approx(1 / 3)
    with pytest.raises(ValueError):
        meta_probability([1.0], [1.0, 2.0])


@pytest.mark.parametrize("delta", [0.5, 0.05])
def test_meta_probability_calibrated_on_gaussian_fields(delta):
    rng = np.random.default_rng(42)
    m = 20_000
    mu, sigma = rng.normal(-3, 1, m), rng.uniform(0.2, 2.0, m)
    t = rng.normal(mu, sigma)            # truth drawn from the posterior itself
    rates = rate_select_many(mu, sigma, delta, 10.0)
    assert meta_probability(rates, np.exp(t), 10.0) == pytest.approx(delta, abs=3 * math.sqrt(delta / m) + 0.005)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_meta_probability_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    p = meta_probability(rng.uniform(0, 5, 30), rng.exponential(3, 30), float(rng.uniform(0.1, 10)))
    assert 0.0 <= p <= 1.0


def test_normalized_rate():
    assert normalized_rate(2.5, 2.5) == 1.0
    assert normalized_rate(0.0, 3.0) == 0.0
    assert normalized_rate(0.0, 0.0) == 1.0
    assert normalized_rate(1.0, 0.0) == math.inf
    np.testing.assert_array_equal(normalized_rate([1.0, 0.0, 2.0], [2.0, 0.0, 0.0]), [0.5, 1.0, math.inf])


def test_decisions_csv(tmp_path):
    rates = np.array([1.0, 0.5, 0.0])
    ideal = np.array([0.8, 1.0, 0.0])
    write_decisions_csv(tmp_path / "d.csv", rates, ideal)
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "index,R,R_ideal,normalized,violation_flag"
    rows = np.loadtxt(tmp_path / "d.csv", delimiter=",", skiprows=1)
    np.testing.assert_array_equal(rows[:, 1], rates)
    np.testing.assert_array_equal(rows[:, 3], [1.25, 0.5, 1.0])
    assert rows[:, 4].tolist() == [1, 0, 0]
