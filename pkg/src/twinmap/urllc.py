"""URLLC rate selection from a Gaussian belief over the log-quantile."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from twinmap.stats import empirical_quantile

_TWO_OVER_SQRT_PI = 2.0 / math.sqrt(math.pi)


def erfinv(y):
    """Inverse error function.

    Giles' single-precision rational approximation (2010), refined by one
    Newton step on ``erf``; absolute error below 1e-12 on [-0.999, 0.999].
    """
    y = np.asarray(y, dtype=float)
    if np.any(np.abs(y) >= 1):
        raise ValueError("erfinv is finite only on (-1, 1)")
    w = -np.log((1.0 - y) * (1.0 + y))
    central = w < 5.0
    wc = w - 2.5
    pc = 2.81022636e-08
    for coef in (3.43273939e-07, -3.5233877e-06, -4.39150654e-06, 0.00021858087,
                 -0.00125372503, -0.00417768164, 0.246640727, 1.50140941):
        pc = coef + pc * wc
    wt = np.sqrt(w) - 3.0
    pt = -0.000200214257
    for coef in (0.000100950558, 0.00134934322, -0.00367342844, 0.00573950773,
                 -0.0076224613, 0.00943887047, 1.00167406, 2.83297682):
        pt = coef + pt * wt
    x = np.where(central, pc, pt) * y
    x = x - (erf(x) - y) / (_TWO_OVER_SQRT_PI * np.exp(-x * x))
    return float(x) if x.ndim == 0 else x


@dataclass(frozen=True)
class RateDecision:
    rate: float
    index: int
    delta: float
    mu: float
    sigma: float
    ptx_over_noise: float = 1.0


def _rate(mu, sigma, delta, ptx_over_noise):
    if not 0 < delta < 1:
        raise ValueError("delta must lie strictly between 0 and 1")
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma < 0):
        raise ValueError("sigma must be non-negative")
    exponent = np.asarray(mu, dtype=float) + math.sqrt(2.0) * sigma * erfinv(2.0 * delta - 1.0)
    return np.log2(1.0 + ptx_over_noise * np.exp(exponent))


def rate_select(mu: float, sigma: float, delta: float, ptx_over_noise: float = 1.0,
                index: int = -1) -> RateDecision:
    """Largest rate whose log-quantile belief is exceeded with probability 1 - delta."""
    r = float(_rate(mu, sigma, delta, ptx_over_noise))
    return RateDecision(r, index, delta, float(mu), float(sigma), ptx_over_noise)


def rate_select_many(mu, sigma, delta: float, ptx_over_noise: float = 1.0) -> np.ndarray:
    return np.asarray(_rate(mu, sigma, delta, ptx_over_noise), dtype=float)


def ideal_rate(power_samples, epsilon: float, ptx_over_noise: float = 1.0):
    """Outage capacity from the empirical epsilon-quantile of the true fading."""
    q = empirical_quantile(power_samples, epsilon)
    return np.log2(1.0 + ptx_over_noise * q)


def meta_probability(rates, truth_quantiles, ptx_over_noise: float = 1.0) -> float:
    """Fraction of locations whose selected rate strictly exceeds the truth-derived rate."""
    if isinstance(rates, (list, tuple)):
        rates = [d.rate if isinstance(d, RateDecision) else d for d in rates]
    rates = np.asarray(rates, dtype=float)
    truth = np.log2(1.0 + ptx_over_noise * np.asarray(truth_quantiles, dtype=float))
    if rates.shape != truth.shape:
        raise ValueError("rates and truth must align")
    if rates.size == 0:
        return 0.0
    return float(np.mean(rates > truth))


def normalized_rate(rate, rate_ideal):
    """R / R_ideal with 0/0 := 1; x/0 for x > 0 gives inf (an anomaly)."""
    rate = np.asarray(rate, dtype=float)
    ideal = np.asarray(rate_ideal, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(ideal > 0, rate / np.where(ideal > 0, ideal, 1.0),
                       np.where(rate > 0, np.inf, 1.0))
    return float(out) if out.ndim == 0 else out


def write_decisions_csv(path, rates, ideal) -> None:
    norm = normalized_rate(rates, ideal)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "R", "R_ideal", "normalized", "violation_flag"])
        for i, (r, ri, n) in enumerate(zip(rates, ideal, np.atleast_1d(norm))):
            w.writerow([i, repr(float(r)), repr(float(ri)), repr(float(n)), int(r > ri)])
