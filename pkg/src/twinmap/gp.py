"""Closed-form GP conditioning on noisy observations at a subset of the grid."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from twinmap.prior import GpPrior

VARIANCE_TOL = 1e-10


class PosteriorError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Observations:
    indices: np.ndarray
    values: np.ndarray
    noise: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=int).reshape(-1)
        vals = np.asarray(self.values, dtype=float).reshape(-1)
        noise = np.broadcast_to(np.asarray(self.noise, dtype=float), idx.shape).copy()
        if vals.shape != idx.shape:
            raise ValueError("indices and values must have equal length")
        if len(np.unique(idx)) != len(idx):
            raise ValueError("observation indices must be distinct")
        if np.any(noise < 0):
            raise ValueError("noise variances must be non-negative")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "noise", noise)

    def __len__(self):
        return len(self.indices)

    @classmethod
    def empty(cls) -> "Observations":
        return cls(np.zeros(0, dtype=int), np.zeros(0), np.zeros(0))


@dataclass(frozen=True, eq=False)
class PosteriorField:
    mean: np.ndarray
    variance: np.ndarray
    plan: Observations
    kind: str
    targets: np.ndarray

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variance)


class GpSolver:
    """Cholesky factor of ``C_AA + Sigma_A`` plus the weights for one ``y_A``.

    Queries for any target set reuse the factorization; :meth:`with_values`
    swaps the observed values while keeping the factor.
    """

    def __init__(self, prior: GpPrior, obs: Observations, _factor=None):
        m = prior.size
        if len(obs) and (obs.indices.min() < 0 or obs.indices.max() >= m):
            raise IndexError("observation index out of range")
        self.prior = prior
        self.obs = obs
        a = obs.indices
        if _factor is None and len(a):
            K = prior.cov[np.ix_(a, a)] + np.diag(obs.noise)
            try:
                _factor = linalg.cholesky(K, lower=True, check_finite=False)
            except linalg.LinAlgError as exc:
                raise PosteriorError("C_AA + Sigma_A is not positive definite") from exc
        self.factor = _factor
        if len(a):
            resid = obs.values - prior.mean[a]
            self.weights = linalg.cho_solve((self.factor, True), resid, check_finite=False)
        else:
            self.weights = np.zeros(0)

    def with_values(self, values) -> "GpSolver":
        obs = Observations(self.obs.indices, values, self.obs.noise)
        return GpSolver(self.prior, obs, _factor=self.factor)

    def predict_mean(self, targets=None) -> np.ndarray:
        """Posterior mean only; with a reused factor this is a matrix-vector product."""
        t = np.arange(self.prior.size) if targets is None else np.asarray(targets, dtype=int).reshape(-1)
        if len(self.obs) == 0:
            return self.prior.mean[t].copy()
        return self.prior.mean[t] + self.prior.cov[np.ix_(self.obs.indices, t)].T @ self.weights

    def predict(self, targets=None) -> PosteriorField:
        prior = self.prior
        t = np.arange(prior.size) if targets is None else np.asarray(targets, dtype=int).reshape(-1)
        prior_var = np.diag(prior.cov)[t]
        a = self.obs.indices
        if len(a) == 0:
            mean = prior.mean[t].copy()
            var = prior_var.copy()
        else:
            cross = prior.cov[np.ix_(a, t)]
            mean = prior.mean[t] + cross.T @ self.weights
            v = linalg.solve_triangular(self.factor, cross, lower=True, check_finite=False)
            var = prior_var - np.einsum("ij,ij->j", v, v)
        tol = VARIANCE_TOL * np.maximum(prior_var, 1.0)
        if np.any(var < -tol):
            worst = int(np.argmin(var + tol))
            raise PosteriorError(f"negative posterior variance {var[worst]:.3e} at target {t[worst]}")
        var = np.maximum(var, 0.0)
        return PosteriorField(mean=mean, variance=var, plan=self.obs, kind=prior.kind, targets=t)


def precompute_solver(prior: GpPrior, obs: Observations) -> GpSolver:
    return GpSolver(prior, obs)


def posterior(prior: GpPrior, obs: Observations, targets=None) -> PosteriorField:
    """Posterior mean and variance of the field at ``targets`` (default: all of S)."""
    return GpSolver(prior, obs).predict(targets)


def write_posterior_csv(path, field: PosteriorField, points: np.ndarray, extra: dict | None = None) -> None:
    """CSV with ``index,x,y,mean,variance,observed_flag``; ``extra`` prepends constant columns."""
    observed = np.zeros(len(field.targets), dtype=int)
    observed[np.isin(field.targets, field.plan.indices)] = 1
    extra = extra or {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*extra, "index", "x", "y", "mean", "variance", "observed_flag"])
        for j, i in enumerate(field.targets):
            w.writerow([*extra.values(), int(i), repr(float(points[i, 0])), repr(float(points[i, 1])),
                        repr(float(field.mean[j])), repr(float(field.variance[j])), int(observed[j])])
