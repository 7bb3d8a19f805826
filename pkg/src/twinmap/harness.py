"""Experiment runner: twin ensemble -> priors -> probing plans -> posteriors -> metrics.

Every random quantity is derived from integer seeds in the config, so a
config fully determines the CSV outputs.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from twinmap.gp import Observations, PosteriorField, posterior
from twinmap.prior import (
    GpPrior,
    MaternParams,
    ensemble_prior,
    fit_matern_mle,
    matern_prior,
    stationary_dt_prior,
)
from twinmap.propagate import PowerCache, channel_power_matrix
from twinmap.scene import CandidateGrid, Scene, build_grid, load_scene, sample_beta
from twinmap.select import ProbePlan, greedy_select, lazy_greedy_select, random_select
from twinmap.stats import QuantileDataset, build_dataset, empirical_quantile
from twinmap.urllc import normalized_rate, rate_select_many

log = logging.getLogger(__name__)

SCHEMES = ("proposed", "uninformed", "stationary_dt")
DEFAULT_SCENE = "desk"


def default_scene_path() -> Path:
    return Path(str(resources.files("twinmap") / "data" / "desk_scene.json"))


@dataclass
class ExperimentConfig:
    scene: str = DEFAULT_SCENE
    epsilon: float = 0.05
    ensemble_size: int = 50
    budgets: list = field(default_factory=lambda: [5, 10, 15, 20, 25, 30, 35, 40, 45])
    schemes: list = field(default_factory=lambda: list(SCHEMES))
    delta: float = 0.05
    seeds: list = field(default_factory=lambda: list(range(20)))
    prior_seed: int = 100_000
    noise: float = 0.01
    pos_bound: float = 2.0
    max_order: int = 2
    shrinkage: float | str = "auto"
    matern_nu: float = 1.5
    ptx_over_noise: float = 1e10
    lazy: bool = True
    output_dir: str = "twinmap_out"
    cache_dir: str | None = None

    def __post_init__(self):
        if not self.schemes or any(s not in SCHEMES for s in self.schemes):
            raise ValueError(f"schemes must be a non-empty subset of {SCHEMES}")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if not self.budgets or min(self.budgets) < 0:
            raise ValueError("budgets must be non-negative")
        if self.ensemble_size < 2:
            raise ValueError("ensemble_size must be at least 2")
        overlap = set(self.seeds) & set(self.prior_seeds)
        if overlap:
            raise ValueError(f"target seeds overlap prior seeds: {sorted(overlap)[:5]}")

    @property
    def prior_seeds(self) -> list[int]:
        return [self.prior_seed + k for k in range(self.ensemble_size)]

    def scene_path(self) -> Path:
        return default_scene_path() if self.scene == DEFAULT_SCENE else Path(self.scene)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        data = json.loads(Path(path).read_text())
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**data)
        if cfg.scene != DEFAULT_SCENE and not Path(cfg.scene).is_absolute():
            cfg.scene = str((Path(path).parent / cfg.scene).resolve())
        return cfg


@dataclass
class MetricsRecord:
    scheme: str
    budget: int
    seed: int
    mae: float
    meta_probability: float
    normalized_rates: np.ndarray
    anomalies: int
    wall_time: float = 0.0

    @property
    def median_normalized_rate(self) -> float:
        finite = self.normalized_rates[np.isfinite(self.normalized_rates)]
        return float(np.median(finite)) if finite.size else float("nan")


@dataclass
class ExperimentResult:
    records: list
    plans: dict
    priors: dict
    output_dir: Path


def mae(posterior_mean, truth) -> float:
    """Mean absolute prediction error over the grid."""
    return float(np.mean(np.abs(np.asarray(posterior_mean, float) - np.asarray(truth, float))))


def rate_cdf(samples) -> tuple[np.ndarray, np.ndarray, int]:
    """Empirical CDF at each distinct finite value; non-finite samples are counted, not used."""
    x = np.asarray(samples, dtype=float).ravel()
    finite = np.isfinite(x)
    x = np.sort(x[finite])
    if x.size == 0:
        return np.zeros(0), np.zeros(0), int((~finite).sum())
    values, counts = np.unique(x, return_counts=True)
    return values, np.cumsum(counts) / x.size, int((~finite).sum())


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("TWINMAP_THREADS", "1")))
    except ValueError:
        return 1


class _Twin:
    """Scene + grid + trace settings, producing log-quantile realizations."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.scene: Scene = load_scene(cfg.scene_path())
        self.grid: CandidateGrid = build_grid(self.scene)
        self.cache = PowerCache(cfg.cache_dir) if cfg.cache_dir else None

    def power(self, seed):
        beta = sample_beta(self.scene, seed, self.cfg.pos_bound)
        if self.cache is not None:
            return self.cache.get_or_compute(self.scene, self.grid, beta, self.cfg.max_order, self.cfg.pos_bound)
        return channel_power_matrix(self.scene, self.grid, beta, self.cfg.max_order)

    def dataset(self, seed) -> QuantileDataset:
        return build_dataset(self.power(seed), self.cfg.epsilon)

    def datasets(self, seeds) -> list[QuantileDataset]:
        n = _threads()
        if n == 1:
            return [self.dataset(s) for s in seeds]
        with ThreadPoolExecutor(max_workers=n) as pool:
            return list(pool.map(self.dataset, seeds))


def _lengthscale_bounds(scene: Scene) -> tuple[float, float]:
    spec = scene.grid_spec
    return spec.spacing / 2.0, 10.0 * max(spec.extent)


def _default_matern(scene: Scene, cfg: ExperimentConfig) -> MaternParams:
    return MaternParams(signal_variance=1.0, lengthscale=4.0 * scene.grid_spec.spacing,
                        nu=cfg.matern_nu, noise=cfg.noise)


def _refit_prior(points, mean, obs: Observations, fallback: MaternParams, cfg, bounds, kind) -> GpPrior:
    """Matérn covariance fitted to the observed residuals at the probed locations."""
    if len(obs) >= 3:
        resid = obs.values - mean[obs.indices]
        params = fit_matern_mle(points[obs.indices], resid, cfg.noise, cfg.matern_nu, bounds)
    else:
        params = fallback
    return matern_prior(points, params, mean=mean, kind=kind)


def _select(prior: GpPrior, k: int, cfg: ExperimentConfig) -> ProbePlan:
    fn = lazy_greedy_select if cfg.lazy else greedy_select
    return fn(prior, k, cfg.noise)


def _fmt(v: float) -> str:
    return repr(float(v))


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> ExperimentResult:
    t_start = time.perf_counter()
    twin = _Twin(cfg)
    scene, grid = twin.scene, twin.grid
    points = grid.points
    m = len(grid)
    if max(cfg.budgets) > m:
        raise ValueError(f"budget {max(cfg.budgets)} exceeds grid size {m}")
    kmax = max(cfg.budgets)
    bounds = _lengthscale_bounds(scene)

    log.info("tracing %d prior realizations over %d locations", cfg.ensemble_size, m)
    prior_sets = twin.datasets(cfg.prior_seeds)

    priors: dict[str, GpPrior] = {}
    plans: dict[str, ProbePlan] = {}
    if "proposed" in cfg.schemes:
        priors["proposed"] = ensemble_prior(prior_sets, cfg.shrinkage)
        plans["proposed"] = _select(priors["proposed"], kmax, cfg)
    if "stationary_dt" in cfg.schemes:
        priors["stationary_dt"] = stationary_dt_prior(prior_sets[0], grid, scene.ap_position, cfg.noise,
                                                      cfg.matern_nu, bounds)
        plans["stationary_dt"] = _select(priors["stationary_dt"], kmax, cfg)
    if "uninformed" in cfg.schemes:
        priors["uninformed"] = matern_prior(points, _default_matern(scene, cfg), kind="matern_mle")

    records: list[MetricsRecord] = []
    posteriors: dict[tuple, PosteriorField] = {}
    seed_plans: dict[tuple, ProbePlan] = {}
    truths: dict[int, tuple] = {}
    for seed in cfg.seeds:
        P = twin.power(seed)
        truth = build_dataset(P, cfg.epsilon).values
        p_eps = empirical_quantile(P.values, cfg.epsilon, axis=0)
        r_ideal = np.log2(1.0 + cfg.ptx_over_noise * p_eps)
        noise_draw = np.random.default_rng([seed, 1]).normal(0.0, np.sqrt(cfg.noise), m)
        y_full = truth + noise_draw
        truths[seed] = (truth, r_ideal)
        for scheme in cfg.schemes:
            if scheme == "uninformed":
                plan = random_select(m, kmax, [seed, 2])
            else:
                plan = plans[scheme]
            seed_plans[(scheme, seed)] = plan
            base = priors[scheme]
            for b in sorted(cfg.budgets):
                t0 = time.perf_counter()
                idx = plan.indices[:b]
                obs = Observations(idx, y_full[idx], cfg.noise)
                if scheme == "proposed":
                    prior = base
                elif scheme == "stationary_dt":
                    prior = _refit_prior(points, base.mean, obs, base.params, cfg, bounds, "stationary_dt")
                else:
                    prior = _refit_prior(points, base.mean, obs, base.params, cfg, bounds, "matern_mle")
                post = posterior(prior, obs)
                rates = rate_select_many(post.mean, post.std, cfg.delta, cfg.ptx_over_noise)
                norm = np.atleast_1d(normalized_rate(rates, r_ideal))
                records.append(MetricsRecord(
                    scheme=scheme, budget=b, seed=seed,
                    mae=mae(post.mean, truth),
                    meta_probability=float(np.mean(rates > r_ideal)),
                    normalized_rates=norm,
                    anomalies=int(np.sum(~np.isfinite(norm))),
                    wall_time=time.perf_counter() - t0,
                ))
                posteriors[(scheme, b, seed)] = (post, rates)
        log.info("seed %s done", seed)

    out = Path(cfg.output_dir)
    if write:
        _write_outputs(out, cfg, scene, grid, records, posteriors, seed_plans, truths,
                       time.perf_counter() - t_start)
    return ExperimentResult(records=records, plans=plans, priors=priors, output_dir=out)


def _sort_key(scheme: str) -> int:
    return SCHEMES.index(scheme)


def _write_outputs(out: Path, cfg, scene, grid, records, posteriors, seed_plans, truths, elapsed):
    out.mkdir(parents=True, exist_ok=True)
    points = grid.points
    written = []

    def open_csv(name):
        written.append(name)
        return open(out / name, "w", newline="")

    recs = sorted(records, key=lambda r: (_sort_key(r.scheme), r.budget, r.seed))
    with open_csv("mae.csv") as fh:
        w = csv.writer(fh)
        w.writerow(["scheme", "budget", "seed", "mae", "meta_probability", "median_normalized_rate", "anomalies"])
        for r in recs:
            w.writerow([r.scheme, r.budget, r.seed, _fmt(r.mae), _fmt(r.meta_probability),
                        _fmt(r.median_normalized_rate), r.anomalies])

    with open_csv("summary.csv") as fh:
        w = csv.writer(fh)
        w.writerow(["scheme", "budget", "mae_median", "mae_lo", "mae_hi",
                    "meta_probability_median", "normalized_rate_median", "anomalies"])
        for row in summarize(records):
            w.writerow([row["scheme"], row["budget"], *(_fmt(row[k]) for k in
                        ("mae_median", "mae_lo", "mae_hi", "meta_probability_median", "normalized_rate_median")),
                        row["anomalies"]])

    for b in sorted(set(cfg.budgets)):
        with open_csv(f"rate_cdf_{b}.csv") as fh:
            w = csv.writer(fh)
            w.writerow(["scheme", "value", "cdf"])
            for scheme in sorted(cfg.schemes, key=_sort_key):
                pooled = np.concatenate([r.normalized_rates for r in recs if r.scheme == scheme and r.budget == b])
                values, cdf, _ = rate_cdf(pooled)
                for v, c in zip(values, cdf):
                    w.writerow([scheme, _fmt(v), _fmt(c)])

    for scheme in sorted(cfg.schemes, key=_sort_key):
        with open_csv(f"plan_{scheme}.csv") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", "step", "index", "x", "y", "gain"])
            for seed in cfg.seeds:
                plan = seed_plans[(scheme, seed)]
                for step, (i, g) in enumerate(zip(plan.chosen, plan.gains)):
                    w.writerow([seed, step, i, _fmt(points[i, 0]), _fmt(points[i, 1]), _fmt(g)])
        for b in sorted(set(cfg.budgets)):
            with open_csv(f"posterior_{scheme}_{b}.csv") as fh:
                w = csv.writer(fh)
                w.writerow(["seed", "index", "x", "y", "mean", "variance", "observed_flag"])
                for seed in cfg.seeds:
                    post, _ = posteriors[(scheme, b, seed)]
                    observed = np.zeros(len(points), dtype=int)
                    observed[post.plan.indices] = 1
                    for i in range(len(points)):
                        w.writerow([seed, i, _fmt(points[i, 0]), _fmt(points[i, 1]),
                                    _fmt(post.mean[i]), _fmt(post.variance[i]), observed[i]])
            with open_csv(f"decisions_{scheme}_{b}.csv") as fh:
                w = csv.writer(fh)
                w.writerow(["seed", "index", "R", "R_ideal", "normalized", "violation_flag"])
                for seed in cfg.seeds:
                    _, rates = posteriors[(scheme, b, seed)]
                    _, r_ideal = truths[seed]
                    norm = np.atleast_1d(normalized_rate(rates, r_ideal))
                    for i in range(len(points)):
                        w.writerow([seed, i, _fmt(rates[i]), _fmt(r_ideal[i]), _fmt(norm[i]),
                                    int(rates[i] > r_ideal[i])])

    manifest = {
        "config": asdict(cfg),
        "scene_digest": scene.digest(),
        "grid_size": len(points),
        "files": {name: hashlib.sha256((out / name).read_bytes()).hexdigest() for name in sorted(written)},
    }
    manifest["config"].pop("output_dir")
    manifest["config"].pop("cache_dir")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    timing = {"total_seconds": elapsed,
              "cells": [[r.scheme, r.budget, r.seed, r.wall_time] for r in records]}
    (out / "timing.json").write_text(json.dumps(timing) + "\n")


def summarize(records) -> list[dict]:
    """Median and central 75% interval across seeds per (scheme, budget)."""
    rows = []
    keys = sorted({(r.scheme, r.budget) for r in records}, key=lambda k: (_sort_key(k[0]), k[1]))
    for scheme, b in keys:
        cell = [r for r in records if r.scheme == scheme and r.budget == b]
        maes = np.array([r.mae for r in cell])
        rates = np.concatenate([r.normalized_rates for r in cell])
        rates = rates[np.isfinite(rates)]
        rows.append({
            "scheme": scheme,
            "budget": b,
            "mae_median": float(np.median(maes)),
            "mae_lo": float(np.quantile(maes, 0.125)),
            "mae_hi": float(np.quantile(maes, 0.875)),
            "meta_probability_median": float(np.median([r.meta_probability for r in cell])),
            "normalized_rate_median": float(np.median(rates)) if rates.size else float("nan"),
            "anomalies": int(sum(r.anomalies for r in cell)),
        })
    return rows
