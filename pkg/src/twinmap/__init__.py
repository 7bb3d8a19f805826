"""Digital-twin-assisted prediction of spatial channel statistics.

A randomized image-method propagation model supplies geometry-aware Gaussian
process priors over the log-quantile of channel power; greedy mutual
information selects probing locations; closed-form GP conditioning predicts
the statistic everywhere and drives URLLC rate selection.
"""

from twinmap.scene import (
    BetaDraw,
    CandidateGrid,
    Obstacle,
    Scene,
    SceneError,
    build_grid,
    load_scene,
    sample_beta,
)
from twinmap.propagate import Path, PowerMatrix, channel_power_matrix, path_amplitude, trace_paths
from twinmap.stats import QuantileDataset, build_dataset, empirical_outage, empirical_quantile, log_quantile
from twinmap.prior import (
    GpPrior,
    MaternParams,
    PathlossFit,
    ensemble_prior,
    fit_matern_mle,
    matern_cov,
    pathloss_fit,
    regularize,
    shrinkage_intensity,
    stationary_dt_prior,
)
from twinmap.gp import Observations, PosteriorField, posterior, precompute_solver
from twinmap.select import ProbePlan, greedy_select, lazy_greedy_select, mi_gain, random_select
from twinmap.urllc import RateDecision, ideal_rate, meta_probability, normalized_rate, rate_select

__version__ = "0.1.0"

__all__ = [
    "BetaDraw", "CandidateGrid", "Obstacle", "Scene", "SceneError", "build_grid", "load_scene", "sample_beta",
    "Path", "PowerMatrix", "channel_power_matrix", "path_amplitude", "trace_paths",
    "QuantileDataset", "build_dataset", "empirical_outage", "empirical_quantile", "log_quantile",
    "GpPrior", "MaternParams", "PathlossFit", "ensemble_prior", "fit_matern_mle", "matern_cov", "pathloss_fit",
    "regularize", "shrinkage_intensity", "stationary_dt_prior",
    "Observations", "PosteriorField", "posterior", "precompute_solver",
    "ProbePlan", "greedy_select", "lazy_greedy_select", "mi_gain", "random_select",
    "RateDecision", "ideal_rate", "meta_probability", "normalized_rate", "rate_select",
]
