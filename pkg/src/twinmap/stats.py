"""Order-statistic quantiles of fading power and the log-quantile target field."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from twinmap.propagate import POWER_FLOOR, PowerMatrix
from twinmap.scene import CandidateGrid


@dataclass(frozen=True, eq=False)
class QuantileDataset:
    epsilon: float
    values: np.ndarray
    source: object = None
    floored: int = 0

    def __len__(self):
        return len(self.values)


def _rank(n: int, epsilon: float) -> int:
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    return max(int(np.floor(n * epsilon)), 1)


def empirical_quantile(samples, epsilon: float, axis: int = 0):
    """The r-th smallest sample, r = max(floor(N*epsilon), 1).

    With a 2-D input the quantile is taken along ``axis`` (columns by default).
    """
    x = np.asarray(samples, dtype=float)
    if x.size == 0 or (x.ndim > 1 and x.shape[axis] == 0):
        raise ValueError("empty sample vector")
    n = x.shape[axis] if x.ndim else 1
    r = _rank(n, epsilon)
    if x.ndim <= 1:
        return float(np.partition(x.ravel(), r - 1)[r - 1])
    return np.take(np.partition(x, r - 1, axis=axis), r - 1, axis=axis)


def log_quantile(samples, epsilon: float, floor: float = POWER_FLOOR):
    return np.log(np.maximum(empirical_quantile(samples, epsilon), floor))


def build_dataset(P: PowerMatrix | np.ndarray, epsilon: float, floor: float = POWER_FLOOR) -> QuantileDataset:
    values = P.values if isinstance(P, PowerMatrix) else np.asarray(P, dtype=float)
    source = P.beta_seed if isinstance(P, PowerMatrix) else None
    quant = empirical_quantile(values, epsilon, axis=0)
    low = quant < floor
    q = np.log(np.where(low, floor, quant))
    return QuantileDataset(epsilon=float(epsilon), values=q, source=source, floored=int(low.sum()))


def empirical_outage(samples, rate: float, ptx_over_noise: float = 1.0) -> float:
    """Fraction of samples whose Shannon rate falls strictly below ``rate``."""
    x = np.asarray(samples, dtype=float)
    if x.size == 0:
        raise ValueError("empty sample vector")
    return float(np.mean(np.log2(1.0 + ptx_over_noise * x) < rate))


def write_dataset_csv(path, dataset: QuantileDataset, grid: CandidateGrid) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "x", "y", "z", "q"])
        for i, (p, q) in enumerate(zip(grid.points, dataset.values)):
            w.writerow([i, repr(float(p[0])), repr(float(p[1])), repr(float(p[2])), repr(float(q))])


def read_dataset_csv(path, epsilon: float = float("nan")) -> tuple[QuantileDataset, np.ndarray]:
    """Returns the dataset and the (M, 3) location array stored alongside it."""
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    order = np.argsort(rows[:, 0], kind="stable")
    rows = rows[order]
    return QuantileDataset(epsilon=epsilon, values=rows[:, 4].copy()), rows[:, 1:4].copy()
