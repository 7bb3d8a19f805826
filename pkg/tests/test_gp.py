import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twinmap.gp import Observations, PosteriorError, posterior, precompute_solver, write_posterior_csv
from twinmap.prior import GpPrior

from conftest import random_spd


def _prior(seed, m, rank=None):
    rng = np.random.default_rng(seed)
    return GpPrior(mean=rng.normal(size=m), cov=random_spd(rng, m, rank), jitter=1e-3)


def _brute(prior, idx, y, noise, targets):
    """Joint-Gaussian partition formula with explicit inverses."""
    C, m = prior.cov, prior.mean
    Kinv = np.linalg.inv(C[np.ix_(idx, idx)] + np.diag(noise))
    mean = [m[t] + C[t, idx] @ Kinv @ (y - m[idx]) for t in targets]
    var = [C[t, t] - C[t, idx] @ Kinv @ C[idx, t] for t in targets]
    return np.array(mean), np.array(var)


def test_empty_observations_return_prior():
    p = _prior(0, 5)
    post = posterior(p, Observations.empty())
    np.testing.assert_array_equal(post.mean, p.mean)
    np.testing.assert_array_equal(post.variance, np.diag(p.cov))


def test_noiseless_interpolation():
    p = _prior(1, 6)
    post = posterior(p, Observations([2, 4], [0.7, -1.1], 0.0))
    assert post.mean[2] == pytest.approx(0.7, abs=1e-10)
    assert post.mean[4] == pytest.approx(-1.1, abs=1e-10)
    assert post.variance[2] <= 1e-8 * p.cov[2, 2]
    assert post.variance[4] <= 1e-8 * p.cov[4, 4]


def test_three_point_oracle():
    p = _prior(2, 3)
    post = posterior(p, Observations([1], [0.4], 0.05))
    mean, var = _brute(p, np.array([1]), np.array([0.4]), np.array([0.05]), range(3))
    np.testing.assert_allclose(post.mean, mean, atol=1e-10)
    np.testing.assert_allclose(post.variance, var, atol=1e-10)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), m=st.integers(2, 8))
def test_random_oracle(seed, m):
    rng = np.random.default_rng(seed)
    p = _prior(seed, m)
    k = int(rng.integers(1, m + 1))
    idx = rng.choice(m, k, replace=False)
    y = rng.normal(size=k)
    noise = rng.uniform(0, 0.5, k)
    post = posterior(p, Observations(idx, y, noise))
    mean, var = _brute(p, idx, y, noise, range(m))
    np.testing.assert_allclose(post.mean, mean, atol=1e-9)
    np.testing.assert_allclose(post.variance, np.maximum(var, 0), atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), m=st.integers(2, 12))
def test_variance_properties(seed, m):
    rng = np.random.default_rng(seed)
    p = _prior(seed, m, rank=int(rng.integers(1, m + 1)))
    order = rng.permutation(m)
    noise = rng.uniform(0, 0.2, m)
    y = rng.normal(size=m)
    prev = np.diag(p.cov)
    for k in range(1, m + 1):
        idx = order[:k]
        post = posterior(p, Observations(idx, y[idx], noise[idx]))
        assert np.all(post.variance <= np.diag(p.cov) + 1e-10)
        assert np.all(post.variance <= prev + 1e-10)
        prev = post.variance
    # variance does not depend on y; permuting observation order changes nothing
    idx = order[: max(1, m // 2)]
    a = posterior(p, Observations(idx, y[idx], noise[idx]))
    b = posterior(p, Observations(idx, rng.permutation(y[idx]), noise[idx]))
    assert np.array_equal(a.variance, b.variance)
    perm = rng.permutation(len(idx))
    c = posterior(p, Observations(idx[perm], y[idx][perm], noise[idx][perm]))
    np.testing.assert_allclose(c.mean, a.mean, atol=1e-10)
    np.testing.assert_allclose(c.variance, a.variance, atol=1e-10)


def test_precomputed_matches_one_shot():
    p = _prior(3, 80)
    rng = np.random.default_rng(3)
    idx = rng.choice(80, 20, replace=False)
    obs = Observations(idx, rng.normal(size=20), 0.01)
    solver = precompute_solver(p, obs)
    targets = rng.choice(80, 50, replace=False)
    a, b = solver.predict(targets), posterior(p, obs, targets)
    assert np.array_equal(a.mean, b.mean) and np.array_equal(a.variance, b.variance)
    np.testing.assert_array_equal(solver.predict_mean(targets), a.mean)


def test_handle_reuse_with_new_values():
    p = _prior(4, 30)
    idx = np.arange(0, 30, 3)
    s1 = precompute_solver(p, Observations(idx, np.zeros(len(idx)), 0.01))
    y2 = np.linspace(-1, 1, len(idx))
    s2 = s1.with_values(y2)
    assert s2.factor is s1.factor
    fresh = posterior(p, Observations(idx, y2, 0.01))
    assert np.array_equal(s2.predict().mean, fresh.mean)
    assert np.array_equal(s2.predict().variance, fresh.variance)


def test_reuse_timing_soft():
    m, k = 1000, 200
    rng = np.random.default_rng(5)
    X = rng.uniform(0, 100, (m, 2))
    C = np.exp(-np.linalg.norm(X[:, None] - X[None], axis=-1) / 20) + 1e-6 * np.eye(m)
    p = GpPrior(np.zeros(m), C)
    idx = rng.choice(m, k, replace=False)
    obs = Observations(idx, rng.normal(size=k), 0.01)
    solver = precompute_solver(p, obs)

    def best_of(fn, n=5):
        times = []
        for _ in range(n):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        return min(times)

    fresh = best_of(lambda: posterior(p, Observations(idx, rng.normal(size=k), 0.01)))
    reuse = best_of(lambda: solver.with_values(rng.normal(size=k)).predict_mean())
    assert reuse * 5 <= fresh


def test_observation_validation():
    with pytest.raises(ValueError, match="distinct"):
        Observations([1, 1], [0.0, 0.0], 0.1)
    with pytest.raises(ValueError, match="non-negative"):
        Observations([1], [0.0], -0.1)
    with pytest.raises(ValueError, match="equal length"):
        Observations([1, 2], [0.0], 0.1)
    obs = Observations([3, 1], [0.5, 0.2], 0.1)
    assert obs.noise.tolist() == [0.1, 0.1] and len(obs) == 2
    with pytest.raises(IndexError):
        posterior(_prior(0, 3), Observations([5], [0.0], 0.1))


def test_factorization_failure():
    bad = GpPrior(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(PosteriorError):
        posterior(bad, Observations([0, 1], [0.0, 0.0], 0.0))


def test_negative_variance_raises():
    # Indefinite prior: conditioning on index 0 gives 1 - 4 = -3 at index 1.
    bad = GpPrior(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(PosteriorError, match="negative posterior variance"):
        posterior(bad, Observations([0], [0.0], 0.0))


def test_tiny_negative_variance_clamped():
    C = np.array([[1.0, 1.0], [1.0, 1.0 + 1e-13]])
    post = posterior(GpPrior(np.zeros(2), C), Observations([0], [0.3], 0.0))
    assert np.all(post.variance >= 0)


def test_posterior_csv(tmp_path):
    p = _prior(6, 4)
    post = posterior(p, Observations([1], [0.2], 0.01))
    pts = np.arange(12.0).reshape(4, 3)
    write_posterior_csv(tmp_path / "post.csv", post, pts)
    lines = (tmp_path / "post.csv").read_text().splitlines()
    assert lines[0] == "index,x,y,mean,variance,observed_flag"
    rows = np.loadtxt(tmp_path / "post.csv", delimiter=",", skiprows=1)
    np.testing.assert_array_equal(rows[:, 3], post.mean)
    np.testing.assert_array_equal(rows[:, 4], post.variance)
    assert rows[:, 5].tolist() == [0, 1, 0, 0]
