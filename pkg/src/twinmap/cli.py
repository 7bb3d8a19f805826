"""Command-line entry point: ``twinmap {run,trace,prior,select,predict}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from twinmap.gp import Observations, posterior, write_posterior_csv
from twinmap.harness import DEFAULT_SCENE, ExperimentConfig, default_scene_path, run_experiment, summarize
from twinmap.prior import ensemble_prior, load_prior, save_prior
from twinmap.propagate import channel_power_matrix, save_power_matrix
from twinmap.scene import SceneError, build_grid, load_scene, sample_beta
from twinmap.select import greedy_select, lazy_greedy_select, read_plan_csv, write_plan_csv
from twinmap.stats import build_dataset, read_dataset_csv, write_dataset_csv

POINTS_FILE = "points.csv"


def _scene_path(arg: str) -> Path:
    return default_scene_path() if arg == DEFAULT_SCENE else Path(arg)


def _cmd_run(args) -> int:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    if args.output:
        cfg.output_dir = args.output
    if args.cache:
        cfg.cache_dir = args.cache
    result = run_experiment(cfg)
    for row in summarize(result.records):
        print(f"{row['scheme']:<14}{row['budget']:>4}  mae={row['mae_median']:.4f}"
              f"  meta={row['meta_probability_median']:.4f}  rate={row['normalized_rate_median']:.4f}")
    print(f"outputs in {result.output_dir}")
    return 0


def _cmd_trace(args) -> int:
    scene = load_scene(_scene_path(args.scene))
    grid = build_grid(scene)
    beta = sample_beta(scene, args.seed, args.pos_bound)
    pm = channel_power_matrix(scene, grid, beta, args.max_order)
    out = Path(args.out or f"power_{args.seed}.csv")
    save_power_matrix(out, pm)
    print(f"{pm.shape[0]} subcarriers x {pm.shape[1]} locations -> {out}")
    if pm.empty_columns:
        print(f"warning: {pm.empty_columns} locations received no path", file=sys.stderr)
    if args.quantiles:
        write_dataset_csv(args.quantiles, build_dataset(pm, args.epsilon), grid)
        print(f"log-quantiles -> {args.quantiles}")
    return 0


def _cmd_prior(args) -> int:
    scene = load_scene(_scene_path(args.scene))
    grid = build_grid(scene)
    seeds = range(args.first_seed, args.first_seed + args.k)
    sets = [build_dataset(channel_power_matrix(scene, grid, sample_beta(scene, s, args.pos_bound), args.max_order),
                          args.epsilon) for s in seeds]
    shrinkage = args.shrinkage if args.shrinkage == "auto" else float(args.shrinkage)
    prior = ensemble_prior(sets, shrinkage)
    save_prior(args.out, prior)
    np.savetxt(Path(args.out) / POINTS_FILE, grid.points, delimiter=",", fmt="%.17g")
    print(f"ensemble prior over {prior.size} locations (shrinkage {prior.shrinkage:.3f}) -> {args.out}")
    return 0


def _load_points(prior_dir: Path, m: int) -> np.ndarray:
    p = prior_dir / POINTS_FILE
    if p.exists():
        return np.loadtxt(p, delimiter=",", ndmin=2)
    # No stored locations: fall back to the index on the x axis.
    return np.column_stack([np.arange(m, dtype=float), np.zeros(m), np.zeros(m)])


def _cmd_select(args) -> int:
    prior = load_prior(args.prior)
    fn = greedy_select if args.naive else lazy_greedy_select
    plan = fn(prior, args.k, args.noise)
    out = Path(args.out or "plan.csv")
    write_plan_csv(out, plan, _load_points(Path(args.prior), prior.size))
    print(f"{len(plan.chosen)} probes ({plan.method}, {plan.evaluations} gain evaluations) -> {out}")
    return 0


def _cmd_predict(args) -> int:
    prior = load_prior(args.prior)
    idx = read_plan_csv(args.plan)
    if args.budget is not None:
        idx = idx[:args.budget]
    target, _ = read_dataset_csv(args.target)
    if len(target.values) != prior.size:
        raise ValueError(f"target has {len(target.values)} locations, prior has {prior.size}")
    y = target.values[idx]
    if args.noise > 0 and args.seed is not None:
        y = y + np.random.default_rng(args.seed).normal(0.0, np.sqrt(args.noise), len(idx))
    post = posterior(prior, Observations(idx, y, args.noise))
    out = Path(args.out or "posterior.csv")
    write_posterior_csv(out, post, _load_points(Path(args.prior), prior.size))
    err = float(np.mean(np.abs(post.mean - target.values)))
    print(f"posterior from {len(idx)} probes, MAE vs target {err:.4f} -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="twinmap", description="Twin-assisted channel-statistics prediction.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the full experiment from a JSON config")
    p.add_argument("config", nargs="?", help="JSON config; defaults apply when omitted")
    p.add_argument("--output", help="override output_dir")
    p.add_argument("--cache", help="directory for cached power matrices")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("trace", help="dump the power matrix of one twin realization")
    p.add_argument("--scene", default=DEFAULT_SCENE)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--max-order", type=int, default=2)
    p.add_argument("--pos-bound", type=float, default=2.0)
    p.add_argument("--out")
    p.add_argument("--quantiles", help="also write log-quantiles (index,x,y,z,q) here")
    p.add_argument("--epsilon", type=float, default=0.05)
    p.set_defaults(func=_cmd_trace)

    p = sub.add_parser("prior", help="build an ensemble prior from K twin realizations")
    p.add_argument("--scene", default=DEFAULT_SCENE)
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--first-seed", type=int, default=100_000)
    p.add_argument("--epsilon", type=float, default=0.05)
    p.add_argument("--max-order", type=int, default=2)
    p.add_argument("--pos-bound", type=float, default=2.0)
    p.add_argument("--shrinkage", default="auto")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_prior)

    p = sub.add_parser("select", help="greedy mutual-information probe selection")
    p.add_argument("--prior", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--naive", action="store_true", help="plain greedy instead of lazy evaluation")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_select)

    p = sub.add_parser("predict", help="posterior field from probes of a target dataset")
    p.add_argument("--prior", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--target", required=True, help="CSV with index,x,y,z,q")
    p.add_argument("--budget", type=int)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--seed", type=int, help="add Gaussian measurement noise drawn with this seed")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_predict)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SceneError, ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"twinmap: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
