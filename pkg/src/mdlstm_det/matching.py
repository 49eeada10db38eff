"""Global one-to-one assignment of predictors to ground-truth boxes.

The cost of pairing target ``n`` with predictor ``m`` is measured relative to
leaving ``m`` unmatched::

    alpha * |l_m - t_n|^2 - log(c_m) + log(1 - c_m)

so the per-image cost is a constant (every predictor unmatched) plus the sum
of these deltas over the selected pairs.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

CONF_EPS = 1e-7


class TooManyTargets(ValueError):
    def __init__(self, n_targets: int, n_predictors: int):
        self.n_targets, self.n_predictors = n_targets, n_predictors
        super().__init__(f"{n_targets} targets but only {n_predictors} predictors: the page holds "
                         "more objects than the model can represent")


@dataclass
class MatchCostParams:
    alpha_match: float = 1000.0
    alpha_loss: float = 100.0

    def __post_init__(self):
        if self.alpha_match <= 0 or self.alpha_loss <= 0:
            raise ValueError("alpha values must be positive")


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]  # (target n, predictor m), sorted by n
    unmatched_predictors: set[int] = field(default_factory=set)
    total_cost: float = 0.0

    def target_to_predictor(self) -> dict[int, int]:
        return dict(self.pairs)


def _logit(confidence) -> np.ndarray:
    c = np.clip(np.asarray(confidence, dtype=np.float64), CONF_EPS, 1 - CONF_EPS)
    return np.log(c) - np.log1p(-c)


def pair_cost_delta(l, c: float, t, alpha: float) -> float:
    if not 0.0 < c < 1.0:
        raise ValueError(f"confidence must lie in (0, 1), got {c}")
    d = np.asarray(l, dtype=np.float64) - np.asarray(t, dtype=np.float64)
    return float(alpha * np.dot(d, d) - math.log(c) + math.log1p(-c))


def cost_matrix(boxes: np.ndarray, confidence: np.ndarray, targets: np.ndarray,
                alpha: float) -> np.ndarray:
    """(N, M) matrix of :func:`pair_cost_delta` values."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    diff = targets[:, None, :] - boxes[None, :, :]
    return alpha * np.einsum("nmk,nmk->nm", diff, diff) - _logit(confidence)[None, :]


def _result(pairs: list[tuple[int, int]], cost: np.ndarray, m: int) -> MatchResult:
    pairs = sorted(pairs)
    used = {j for _, j in pairs}
    total = math.fsum(float(cost[i, j]) for i, j in pairs)
    return MatchResult(pairs, set(range(m)) - used, total)


def solve_assignment(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-cost assignment of every row of an (n, m) matrix, n <= m.

    Shortest augmenting path with row/column potentials (Hungarian method).
    Solving the rectangular problem directly is equivalent to padding with
    zero-cost dummy rows.
    """
    n, m = cost.shape
    if n > m:
        raise TooManyTargets(n, m)
    if n == 0:
        return []
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)  # owner[j]: 1-based row assigned to column j, 0 if free
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used
            free[0] = False
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free[1:] & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv, inf)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    return [(int(owner[j]) - 1, j - 1) for j in range(1, m + 1) if owner[j]]


def match_hungarian(boxes: np.ndarray, confidence: np.ndarray, targets: np.ndarray,
                    alpha: float = 1000.0) -> MatchResult:
    cost = cost_matrix(boxes, confidence, targets, alpha)
    n, m = cost.shape
    if n > m:
        raise TooManyTargets(n, m)
    return _result(solve_assignment(cost), cost, m)


def match_bruteforce(boxes: np.ndarray, confidence: np.ndarray, targets: np.ndarray,
                     alpha: float = 1000.0, max_permutations: int = 10**7) -> MatchResult:
    """Exhaustive enumeration of injective target->predictor maps (test oracle).

    Permutations are visited in lexicographic order and only a strictly lower
    cost replaces the incumbent, so ties resolve to the lexicographically
    smallest assignment.
    """
    cost = cost_matrix(boxes, confidence, targets, alpha)
    n, m = cost.shape
    if n > m:
        raise TooManyTargets(n, m)
    if n > 8 or math.perm(m, n) > max_permutations:
        raise ValueError(f"instance too large for exhaustive matching (N={n}, M={m})")
    if n == 0:
        return _result([], cost, m)
    best, best_cost = None, math.inf
    rows = np.arange(n)
    perms = itertools.permutations(range(m), n)
    while True:
        chunk = np.array(list(itertools.islice(perms, 65536)), dtype=np.int64)
        if chunk.size == 0:
            break
        totals = cost[rows, chunk].sum(axis=1)
        k = int(np.argmin(totals))
        if totals[k] < best_cost:
            best_cost, best = totals[k], chunk[k]
    return _result(list(zip(range(n), map(int, best))), cost, m)
