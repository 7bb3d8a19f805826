"""Gaussian process priors over the log-quantile field.

Three constructions are provided: the moment-matched ensemble prior built
from randomized twin realizations, a stationary Matérn prior with
maximum-likelihood hyperparameters, and the log-distance regression mean
combined with a Matérn covariance fitted to a single twin realization.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import linalg, optimize
from scipy.spatial.distance import cdist, pdist

from twinmap.scene import CandidateGrid
from twinmap.stats import QuantileDataset

log = logging.getLogger(__name__)

DEFAULT_SHRINKAGE = 0.05
RELATIVE_JITTER = 1e-6
MIN_JITTER = 1e-10


class DegenerateFitWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class GpPrior:
    mean: np.ndarray
    cov: np.ndarray
    kind: str = "ensemble"
    shrinkage: float = 0.0
    jitter: float = 0.0
    params: "MaternParams | None" = None
    pathloss: "PathlossFit | None" = None

    @property
    def size(self) -> int:
        return len(self.mean)

    @property
    def variance(self) -> np.ndarray:
        return np.diag(self.cov).copy()


@dataclass(frozen=True)
class MaternParams:
    signal_variance: float
    lengthscale: float
    nu: float = 1.5
    noise: float = 1e-2
    degenerate: bool = False
    log_likelihood: float = float("nan")

    def __post_init__(self):
        if self.nu not in (0.5, 1.5, 2.5):
            raise ValueError("smoothness must be one of 1/2, 3/2, 5/2")
        if not (self.signal_variance > 0 and self.lengthscale > 0 and self.noise >= 0):
            raise ValueError("Matérn parameters must be strictly positive")


@dataclass(frozen=True)
class PathlossFit:
    zeta: float
    alpha: float

    def __call__(self, distance):
        return self.zeta + self.alpha * np.log(distance)


def _matern_of_distance(d: np.ndarray, params: MaternParams) -> np.ndarray:
    r = np.asarray(d, dtype=float) / params.lengthscale
    if params.nu == 0.5:
        k = np.exp(-r)
    elif params.nu == 1.5:
        s = np.sqrt(3.0) * r
        k = (1.0 + s) * np.exp(-s)
    else:
        s = np.sqrt(5.0) * r
        k = (1.0 + s + s * s / 3.0) * np.exp(-s)
    return params.signal_variance * k


def matern_cov(x, x_prime, params: MaternParams) -> float:
    d = float(np.linalg.norm(np.asarray(x, dtype=float) - np.asarray(x_prime, dtype=float)))
    return float(_matern_of_distance(d, params))


def matern_matrix(X, Y, params: MaternParams) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    return _matern_of_distance(cdist(X, Y), params)


def regularize(C, shrinkage: float = DEFAULT_SHRINKAGE, jitter: float = 0.0) -> np.ndarray:
    """Shrink towards the diagonal and add jitter: (1-l)C + l*diag(C) + j*I."""
    C = np.asarray(C, dtype=float)
    if not 0 <= shrinkage <= 1:
        raise ValueError("shrinkage must lie in [0, 1]")
    if jitter < 0:
        raise ValueError("jitter must be non-negative")
    sym = 0.5 * (C + C.T)
    out = (1.0 - shrinkage) * sym
    # Diagonal set explicitly so no entry can lose mass to rounding.
    np.fill_diagonal(out, np.diag(C) + jitter)
    return out


def default_jitter(C) -> float:
    return max(RELATIVE_JITTER * float(np.median(np.diag(C))), MIN_JITTER)


def _stack(datasets) -> np.ndarray:
    return np.vstack([d.values if isinstance(d, QuantileDataset) else np.asarray(d, dtype=float)
                      for d in datasets])


def shrinkage_intensity(datasets) -> float:
    """Schafer-Strimmer estimate of the optimal shrinkage of correlations towards zero.

    Ratio of the summed estimated variances of the off-diagonal sample
    correlations to their summed squares, clipped to [0, 1].
    """
    Q = _stack(datasets)
    k = Q.shape[0]
    if k < 3:
        raise ValueError("shrinkage estimate needs at least three realizations")
    X = Q - Q.mean(axis=0)
    sd = X.std(axis=0, ddof=1)
    Z = X / np.where(sd > 0, sd, 1.0)
    wbar = Z.T @ Z / k
    # sum_k (w_kij - wbar_ij)^2 without materialising the K x M x M array
    spread = (Z * Z).T @ (Z * Z) - k * wbar**2
    var_r = k / (k - 1) ** 3 * spread
    r = wbar * k / (k - 1)
    off = ~np.eye(Q.shape[1], dtype=bool)
    denom = float(np.sum(r[off] ** 2))
    if denom <= 0:
        return 1.0
    return float(np.clip(np.sum(var_r[off]) / denom, 0.0, 1.0))


def ensemble_prior(datasets, shrinkage=DEFAULT_SHRINKAGE, jitter: float | None = None) -> GpPrior:
    """Sample mean and (K-1)-normalized sample covariance of K twin realizations.

    ``shrinkage="auto"`` picks the intensity with :func:`shrinkage_intensity`.
    """
    Q = _stack(datasets)
    if Q.shape[0] < 2:
        raise ValueError("ensemble prior needs at least two realizations")
    if shrinkage == "auto":
        shrinkage = shrinkage_intensity(Q)
    mean = Q.mean(axis=0)
    centred = Q - mean
    raw = centred.T @ centred / (Q.shape[0] - 1)
    if jitter is None:
        jitter = default_jitter(raw)
    return GpPrior(
        mean=mean,
        cov=regularize(raw, shrinkage, jitter),
        kind="ensemble",
        shrinkage=shrinkage,
        jitter=jitter,
    )


def matern_log_likelihood(X, y, params: MaternParams, noise=None) -> float:
    """Zero-mean Gaussian log marginal likelihood of ``y`` at locations ``X``."""
    y = np.asarray(y, dtype=float)
    noise = params.noise if noise is None else noise
    K = matern_matrix(X, X, params)
    K[np.diag_indices_from(K)] += noise + 1e-8 * params.signal_variance
    try:
        L = linalg.cholesky(K, lower=True)
    except linalg.LinAlgError:
        return -np.inf
    a = linalg.solve_triangular(L, y, lower=True)
    return float(-0.5 * a @ a - np.log(np.diag(L)).sum() - 0.5 * len(y) * np.log(2 * np.pi))


def _halton(i: int, base: int) -> float:
    f, r = 1.0, 0.0
    while i > 0:
        f /= base
        r += f * (i % base)
        i //= base
    return r


def fit_matern_mle(X, y, noise=1e-2, nu: float = 1.5, lengthscale_bounds=None,
                   n_restarts: int = 8) -> MaternParams:
    """Maximum-likelihood Matérn hyperparameters for zero-mean observations.

    Optimizes log signal variance and log lengthscale with bounded Powell
    searches from ``n_restarts`` quasi-random starts and keeps the best
    point seen, starts included.  Noise variance is held fixed.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    if len(y) < 3:
        raise ValueError("insufficient data: Matérn fit needs at least 3 points")
    noise_level = float(np.mean(noise)) if np.ndim(noise) else float(noise)

    if lengthscale_bounds is None:
        d = pdist(X)
        d = d[d > 0]
        if d.size == 0:
            raise ValueError("insufficient data: all locations coincide")
        lengthscale_bounds = (d.min() / 2.0, 10.0 * d.max())
    lo_l, hi_l = (float(b) for b in lengthscale_bounds)

    var_y = float(np.var(y))
    # Relative range test: np.var of a constant vector can round to a tiny nonzero value.
    if not np.ptp(y) > 1e-12 * max(float(np.max(np.abs(y))), 1e-300):
        warnings.warn("constant observations: lengthscale unidentifiable", DegenerateFitWarning, stacklevel=2)
        return MaternParams(
            signal_variance=max(float(np.mean(y**2)), MIN_JITTER),
            lengthscale=hi_l,
            nu=nu,
            noise=noise_level,
            degenerate=True,
        )
    lo_s, hi_s = 1e-4 * var_y, 1e4 * var_y
    bounds = [(np.log(lo_s), np.log(hi_s)), (np.log(lo_l), np.log(hi_l))]

    def negll(theta):
        p = MaternParams(float(np.exp(theta[0])), float(np.exp(theta[1])), nu, noise_level)
        ll = matern_log_likelihood(X, y, p, noise)
        return -ll if np.isfinite(ll) else 1e300

    best_theta, best_val = None, np.inf
    for i in range(n_restarts):
        u, v = _halton(i + 1, 2), _halton(i + 1, 3)
        start = np.array([
            np.log(var_y) + (v - 0.5) * np.log(100.0),
            bounds[1][0] + u * (bounds[1][1] - bounds[1][0]),
        ])
        start = np.clip(start, [b[0] for b in bounds], [b[1] for b in bounds])
        val0 = negll(start)
        if val0 < best_val:
            best_theta, best_val = start, val0
        res = optimize.minimize(negll, start, method="Powell", bounds=bounds,
                                options={"xtol": 1e-6, "ftol": 1e-10, "maxfev": 2000})
        if res.fun < best_val:
            best_theta, best_val = np.asarray(res.x), float(res.fun)

    return MaternParams(
        signal_variance=float(np.exp(best_theta[0])),
        lengthscale=float(np.exp(best_theta[1])),
        nu=nu,
        noise=noise_level,
        log_likelihood=-best_val,
    )


def pathloss_fit(dataset, grid: CandidateGrid | np.ndarray, ap_position) -> PathlossFit:
    """Least-squares ``q ~ zeta + alpha * log d`` via the normal equations."""
    q = dataset.values if isinstance(dataset, QuantileDataset) else np.asarray(dataset, dtype=float)
    points = grid.points if isinstance(grid, CandidateGrid) else np.atleast_2d(grid)
    logd = np.log(np.linalg.norm(points - np.asarray(ap_position, dtype=float), axis=1))
    if len(logd) < 2 or np.ptp(logd) < 1e-12:
        raise ValueError("singular regression: need at least two distinct distances")
    A = np.column_stack([np.ones_like(logd), logd])
    zeta, alpha = np.linalg.solve(A.T @ A, A.T @ q)
    return PathlossFit(float(zeta), float(alpha))


def matern_prior(points, params: MaternParams, mean=None, kind: str = "matern_mle",
                 jitter: float | None = None, pathloss: PathlossFit | None = None) -> GpPrior:
    points = np.atleast_2d(points)
    cov = matern_matrix(points, points, params)
    if jitter is None:
        jitter = max(RELATIVE_JITTER * params.signal_variance, MIN_JITTER)
    cov[np.diag_indices_from(cov)] += jitter
    mean = np.zeros(len(points)) if mean is None else np.asarray(mean, dtype=float)
    return GpPrior(mean=mean, cov=cov, kind=kind, jitter=jitter, params=params, pathloss=pathloss)


def stationary_dt_prior(dataset, grid: CandidateGrid, ap_position, noise=1e-2, nu: float = 1.5,
                        lengthscale_bounds=None) -> GpPrior:
    """Log-distance mean plus a Matérn covariance fitted to one realization's residuals."""
    fit = pathloss_fit(dataset, grid, ap_position)
    q = dataset.values if isinstance(dataset, QuantileDataset) else np.asarray(dataset, dtype=float)
    mean = fit(np.linalg.norm(grid.points - np.asarray(ap_position, dtype=float), axis=1))
    resid = q - mean
    if np.allclose(resid, 0.0, atol=1e-12):
        params = MaternParams(MIN_JITTER, 1.0, nu, float(np.mean(noise)), degenerate=True)
        return GpPrior(mean=mean, cov=RELATIVE_JITTER * np.eye(len(q)), kind="stationary_dt",
                       jitter=RELATIVE_JITTER, params=params, pathloss=fit)
    params = fit_matern_mle(grid.points, resid, noise, nu, lengthscale_bounds)
    return matern_prior(grid.points, params, mean=mean, kind="stationary_dt", pathloss=fit)


def save_prior(directory, prior: GpPrior) -> None:
    """Mean as CSV, covariance as ``.npy`` and metadata as JSON."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    np.savetxt(d / "mean.csv", prior.mean, delimiter=",", fmt="%.17g")
    np.save(d / "cov.npy", prior.cov)
    meta = {"kind": prior.kind, "shrinkage": prior.shrinkage, "jitter": prior.jitter}
    if prior.params is not None:
        meta["params"] = prior.params.__dict__
    if prior.pathloss is not None:
        meta["pathloss"] = prior.pathloss.__dict__
    (d / "prior.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_prior(directory) -> GpPrior:
    d = Path(directory)
    meta = json.loads((d / "prior.json").read_text())
    params = MaternParams(**meta["params"]) if "params" in meta else None
    pathloss = PathlossFit(**meta["pathloss"]) if "pathloss" in meta else None
    return GpPrior(
        mean=np.atleast_1d(np.loadtxt(d / "mean.csv", delimiter=",")),
        cov=np.load(d / "cov.npy"),
        kind=meta["kind"],
        shrinkage=meta["shrinkage"],
        jitter=meta["jitter"],
        params=params,
        pathloss=pathloss,
    )


def with_cov(prior: GpPrior, cov: np.ndarray, **changes) -> GpPrior:
    return replace(prior, cov=cov, **changes)
