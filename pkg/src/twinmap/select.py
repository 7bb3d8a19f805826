"""Probing-location selection by greedy mutual-information maximization.

The marginal gain of sensing ``c`` given the sensed set ``A`` is

    0.5 * log( Var[t_c | y_A] / Var[t_c | t_rest] ),

where ``rest`` is every other unsensed location.  Measurement noise enters
only the numerator.  Both variances are floored at the prior jitter.
"""

from __future__ import annotations

import csv
import heapq
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from twinmap.prior import GpPrior

DEFAULT_FLOOR = 1e-12
LAZY_SLACK = 1e-8


@dataclass(frozen=True, eq=False)
class ProbePlan:
    chosen: tuple[int, ...]
    gains: tuple[float, ...]
    method: str
    budget: int
    evaluations: int = 0

    def prefix(self, k: int) -> "ProbePlan":
        return ProbePlan(self.chosen[:k], self.gains[:k], self.method, k, self.evaluations)

    @property
    def indices(self) -> np.ndarray:
        return np.asarray(self.chosen, dtype=int)


def _noise_vector(noise, m: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(noise, dtype=float), (m,)).astype(float)


def _conditional_variance(C, c: int, given, extra_diag=None) -> float:
    given = np.asarray(given, dtype=int)
    if len(given) == 0:
        return float(C[c, c])
    K = C[np.ix_(given, given)]
    if extra_diag is not None:
        K = K + np.diag(extra_diag)
    k = C[given, c]
    return float(C[c, c] - k @ np.linalg.solve(K, k))


def mi_gain(C, A, cand: int, noise=0.0, floor: float = DEFAULT_FLOOR) -> float:
    """Direct evaluation of the gain with explicit solves on both conditionals."""
    C = np.asarray(C, dtype=float)
    m = len(C)
    A = [int(a) for a in A]
    if cand in A:
        raise ValueError("candidate already sensed")
    sig = _noise_vector(noise, m)
    num = _conditional_variance(C, cand, A, sig[A] if A else None)
    rest = sorted(set(range(m)) - set(A) - {cand})
    den = _conditional_variance(C, cand, rest)
    ratio = max(num, floor) / max(den, floor)
    if not np.isfinite(ratio) or ratio <= 0:
        raise FloatingPointError("non-finite information gain ratio")
    return 0.5 * float(np.log(ratio))


def mutual_information(C, A, noise=0.0) -> float:
    """I(y_A; t_{S minus A}) for a Gaussian field with covariance ``C``."""
    C = np.asarray(C, dtype=float)
    m = len(C)
    A = np.asarray(sorted(int(a) for a in A), dtype=int)
    rest = np.setdiff1d(np.arange(m), A)
    if len(A) == 0 or len(rest) == 0:
        return 0.0
    sig = _noise_vector(noise, m)
    Kaa = C[np.ix_(A, A)] + np.diag(sig[A])
    Crr = C[np.ix_(rest, rest)]
    Cra = C[np.ix_(rest, A)]
    cond = Crr - Cra @ np.linalg.solve(Kaa, Cra.T)
    return 0.5 * float(np.linalg.slogdet(Crr)[1] - np.linalg.slogdet(cond)[1])


class _GainState:
    """Factorizations shared by every gain evaluation for one sensed set.

    The denominator uses the identity Var[t_c | t_rest] = 1 / [(C_BB)^-1]_cc
    with B the full unsensed set, so one Cholesky factor of C_BB serves all
    candidates.
    """

    def __init__(self, C, sensed, noise, floor):
        self.C = C
        self.floor = floor
        m = len(C)
        self.sensed = np.asarray(sensed, dtype=int)
        mask = np.ones(m, dtype=bool)
        mask[self.sensed] = False
        self.unsensed = np.flatnonzero(mask)
        self.pos = np.full(m, -1)
        self.pos[self.unsensed] = np.arange(len(self.unsensed))
        if len(self.sensed):
            K = C[np.ix_(self.sensed, self.sensed)] + np.diag(noise[self.sensed])
            self.L_a = linalg.cholesky(K, lower=True, check_finite=False)
        else:
            self.L_a = None
        self.L_b = linalg.cholesky(C[np.ix_(self.unsensed, self.unsensed)], lower=True, check_finite=False)

    def gain(self, c: int) -> float:
        C = self.C
        num = C[c, c]
        if self.L_a is not None:
            v = linalg.solve_triangular(self.L_a, C[self.sensed, c], lower=True, check_finite=False)
            num = num - v @ v
        p = self.pos[c]
        block = self.L_b[p:, p:]
        rhs = np.zeros(len(block))
        rhs[0] = 1.0
        z = linalg.solve_triangular(block, rhs, lower=True, check_finite=False)
        den = 1.0 / (z @ z)
        ratio = max(num, self.floor) / max(den, self.floor)
        if not np.isfinite(ratio) or ratio <= 0:
            raise FloatingPointError(f"non-finite information gain ratio at candidate {c}")
        return 0.5 * float(np.log(ratio))


def _cov_and_floor(prior, floor):
    if isinstance(prior, GpPrior):
        C = prior.cov
        if floor is None:
            floor = prior.jitter if prior.jitter > 0 else DEFAULT_FLOOR
    else:
        C = np.asarray(prior, dtype=float)
    return C, DEFAULT_FLOOR if floor is None else floor


def greedy_select(prior: GpPrior | np.ndarray, k: int, noise=0.0, floor: float | None = None) -> ProbePlan:
    """Naive greedy: every unsensed candidate is evaluated at every step."""
    C, floor = _cov_and_floor(prior, floor)
    m = len(C)
    if not 0 <= k <= m:
        raise ValueError("budget must satisfy 0 <= k <= M")
    sig = _noise_vector(noise, m)
    chosen, gains, evals = [], [], 0
    for _ in range(k):
        state = _GainState(C, chosen, sig, floor)
        best, best_gain = -1, -np.inf
        for c in state.unsensed:
            g = state.gain(int(c))
            evals += 1
            if g > best_gain:
                best, best_gain = int(c), g
        chosen.append(best)
        gains.append(best_gain)
    return ProbePlan(tuple(chosen), tuple(gains), "greedy_mi", k, evals)


def lazy_greedy_select(prior: GpPrior | np.ndarray, k: int, noise=0.0, floor: float | None = None,
                       slack: float = LAZY_SLACK) -> ProbePlan:
    """Greedy selection with stale upper bounds (valid by submodularity).

    A fresh leader is accepted only once every stale bound lies more than
    ``slack`` below it, which keeps the plan identical to :func:`greedy_select`
    when rounding perturbs diminishing returns by less than ``slack``.
    """
    C, floor = _cov_and_floor(prior, floor)
    m = len(C)
    if not 0 <= k <= m:
        raise ValueError("budget must satisfy 0 <= k <= M")
    sig = _noise_vector(noise, m)
    chosen, gains, evals = [], [], 0
    heap = [(-np.inf, i, -1) for i in range(m)]
    heapq.heapify(heap)
    for step in range(k):
        state = _GainState(C, chosen, sig, floor)
        while True:
            neg, c, stamp = heap[0]
            if stamp != step:
                heapq.heapreplace(heap, (-state.gain(c), c, step))
                evals += 1
                continue
            threshold = -neg - slack
            doubtful = [e for e in heap if e[2] != step and -e[0] >= threshold]
            if not doubtful:
                break
            for e in doubtful:
                heap.remove(e)
            heapq.heapify(heap)
            for _, d, _ in doubtful:
                heapq.heappush(heap, (-state.gain(d), d, step))
                evals += 1
        neg, c, _ = heapq.heappop(heap)
        chosen.append(c)
        gains.append(-neg)
    return ProbePlan(tuple(chosen), tuple(gains), "lazy_greedy_mi", k, evals)


def naive_evaluations(m: int, k: int) -> int:
    return sum(m - j + 1 for j in range(1, k + 1))


def random_select(m: int, k: int, seed) -> ProbePlan:
    """Uniform sample of ``k`` of ``m`` indices without replacement."""
    if not 0 <= k <= m:
        raise ValueError("budget must satisfy 0 <= k <= M")
    rng = np.random.default_rng(seed)
    chosen = tuple(int(i) for i in rng.permutation(m)[:k])
    return ProbePlan(chosen, (0.0,) * k, "random", k, 0)


def plan_rows(plan: ProbePlan, points: np.ndarray):
    for step, (i, g) in enumerate(zip(plan.chosen, plan.gains)):
        yield [step, i, repr(float(points[i, 0])), repr(float(points[i, 1])), repr(float(g))]


def write_plan_csv(path, plan: ProbePlan, points: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "index", "x", "y", "gain"])
        w.writerows(plan_rows(plan, points))


def read_plan_csv(path) -> np.ndarray:
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    rows = rows[np.argsort(rows[:, 0], kind="stable")]
    return rows[:, 1].astype(int)
