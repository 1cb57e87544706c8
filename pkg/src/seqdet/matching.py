"""Dynamic matching of ground-truth targets to decoder predictions.

The per-pair cost is a weighted sum of classification NLL and squared-L2
box distance; the optimal bijection is found with an O(n^3) shortest
augmenting path (Jonker-Volgenant style) solver.  A brute-force solver
over all permutations serves as the testing oracle for small n.

Matching consumes detached prediction values only: no gradients flow
through the assignment decision itself.

Tie handling: totals are compared as correctly-rounded sums
(``math.fsum`` over entries in target order), and among equal-cost optima
the lexicographically smallest assignment (by target index, then
prediction index) is returned by both solvers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import permutations
from typing import Sequence

import numpy as np

PROB_FLOOR = 1e-12  # clamp before log so Hungarian costs stay finite


@dataclass(frozen=True)
class TargetLabel:
    """One ground-truth object: class id plus box offsets (x, y, w, h)."""

    class_id: int
    t_loc: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "t_loc", np.asarray(self.t_loc, dtype=np.float64))
        if self.t_loc.shape != (4,):
            raise ValueError(f"t_loc must have 4 components, got {self.t_loc.shape}")
        if self.class_id < 0:
            raise ValueError("class_id must index a real object class")

    def one_hot(self, num_outputs: int) -> np.ndarray:
        v = np.zeros(num_outputs)
        v[self.class_id] = 1.0
        return v


@dataclass(frozen=True)
class Assignment:
    """Bijection target index -> prediction index with its total cost."""

    g: tuple[int, ...]
    total_cost: float

    def pairs(self) -> list[tuple[int, int]]:
        return list(enumerate(self.g))


def nll_cost(p_cls: np.ndarray, class_id: int) -> float:
    """Negative log-likelihood of the target class, probability clamped."""
    return -math.log(max(float(p_cls[class_id]), PROB_FLOOR))


def pair_cost(target: TargetLabel, pred, mu_cls: float = 0.0, mu_loc: float = 16.0) -> float:
    """Matching cost between one target and one prediction.

    ``pred`` provides detached values via ``cls_values()`` / ``loc_values()``.
    """
    cost = 0.0
    if mu_cls != 0.0:
        cost += mu_cls * nll_cost(pred.cls_values(), target.class_id)
    if mu_loc != 0.0:
        diff = target.t_loc - pred.loc_values()
        cost += mu_loc * float(diff @ diff)
    return cost


def build_cost_matrix(
    targets: Sequence[TargetLabel],
    preds: Sequence,
    mu_cls: float = 0.0,
    mu_loc: float = 16.0,
) -> np.ndarray:
    """n x p matrix of pair costs (square p == n in the standard regime)."""
    n = len(targets)
    if len(preds) < n:
        raise ValueError(f"need at least {n} matchable predictions, got {len(preds)}")
    costs = np.zeros((n, len(preds)))
    for i, t in enumerate(targets):
        for j, p in enumerate(preds):
            costs[i, j] = pair_cost(t, p, mu_cls, mu_loc)
    return costs


def _validate(costs: np.ndarray) -> np.ndarray:
    costs = np.asarray(costs, dtype=np.float64)
    if costs.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {costs.shape}")
    if costs.size and not np.isfinite(costs).all():
        raise ValueError("cost matrix contains non-finite entries")
    if costs.shape[0] > costs.shape[1]:
        raise ValueError(f"more targets than predictions: {costs.shape}")
    return costs


def _fsum_total(costs: np.ndarray, g: Sequence[int]) -> float:
    return math.fsum(costs[i, j] for i, j in enumerate(g))


def _augmenting_path_solve(costs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shortest-augmenting-path assignment for nr <= nc.

    Returns (col4row, u, v): the column matched to each row and the dual
    potentials certifying optimality.
    """
    nr, nc = costs.shape
    u = np.zeros(nr)
    v = np.zeros(nc)
    col4row = np.full(nr, -1, dtype=np.int64)
    row4col = np.full(nc, -1, dtype=np.int64)

    for cur_row in range(nr):
        shortest = np.full(nc, np.inf)
        path = np.full(nc, -1, dtype=np.int64)
        done_cols = np.zeros(nc, dtype=bool)
        visited_rows = [cur_row]
        min_val = 0.0
        i = cur_row
        sink = -1
        while sink == -1:
            rem = np.flatnonzero(~done_cols)
            d = min_val + costs[i, rem] - u[i] - v[rem]
            better = d < shortest[rem]
            shortest[rem[better]] = d[better]
            path[rem[better]] = i
            sub = shortest[rem]
            lowest = sub.min()
            # prefer an unmatched column among the minima (terminates sooner)
            minima = rem[sub == lowest]
            free = minima[row4col[minima] == -1]
            j = int(free[0]) if free.size else int(minima[0])
            min_val = lowest
            done_cols[j] = True
            if row4col[j] == -1:
                sink = j
            else:
                i = int(row4col[j])
                visited_rows.append(i)
        u[cur_row] += min_val
        for r in visited_rows:
            if r != cur_row:
                u[r] += min_val - shortest[col4row[r]]
        sc = np.flatnonzero(done_cols)
        v[sc] -= min_val - shortest[sc]
        # augment along the alternating path back to cur_row
        j = sink
        while True:
            i = int(path[j])
            row4col[j] = i
            col4row[i], j = j, col4row[i]
            if i == cur_row:
                break
    return col4row, u, v


def _optimum_is_unique(costs: np.ndarray, col4row: np.ndarray, u: np.ndarray, v: np.ndarray) -> bool:
    """True when the duals prove a strictly unique optimum.

    Every non-assignment edge must have reduced cost safely above zero;
    near-zero slack (exact ties or float-level near-ties) fails the proof
    and sends the caller down the exact canonicalization path.
    """
    rc = costs - u[:, None] - v[None, :]
    rc[np.arange(costs.shape[0]), col4row] = np.inf
    scale = 1.0 + float(np.abs(costs).max()) if costs.size else 1.0
    return bool(rc.min() > 1e-9 * scale)


def _lexicographic_refine(costs: np.ndarray, g: list[int], total: float) -> list[int]:
    """Canonicalize an optimal assignment to the lexicographically smallest.

    Greedy over target rows: fix the smallest prediction index that still
    extends to an assignment whose correctly-rounded total equals the
    optimum.  Feasibility is decided by solving the reduced problem.
    """
    nr, nc = costs.shape
    for t in range(nr):
        available = sorted(set(range(nc)) - {g[r] for r in range(t)})
        rest_rows = list(range(t + 1, nr))
        for j in available:
            if j == g[t]:
                break  # current choice already known feasible
            rest_cols = [c for c in available if c != j]
            # cheap lower bound: per-row minima of the remaining block
            lb_entries = [costs[r, g[r]] for r in range(t)] + [costs[t, j]]
            if rest_rows:
                block = costs[np.ix_(rest_rows, rest_cols)]
                lb = math.fsum(lb_entries + list(block.min(axis=1)))
                if lb > total + 1e-9 * (1.0 + abs(total)):
                    continue
                sub = _augmenting_path_solve(block)[0]
                chosen = [rest_cols[c] for c in sub]
                cand = math.fsum(lb_entries + [costs[r, c] for r, c in zip(rest_rows, chosen)])
                if cand == total:
                    g = g[:t] + [j] + chosen
                    break
            else:
                if math.fsum(lb_entries) == total:
                    g = g[:t] + [j]
                    break
    return g


def hungarian(costs: np.ndarray) -> Assignment:
    """Globally minimal assignment of targets (rows) to predictions (columns).

    Accepts square matrices (the standard m = n + 1 regime) and rectangular
    ones with more columns than rows (the extra-predictions regime), in
    which case unmatched columns are simply not assigned.
    """
    costs = _validate(costs)
    nr = costs.shape[0]
    if nr == 0:
        return Assignment(g=(), total_cost=0.0)
    col4row, u, v = _augmenting_path_solve(costs)
    g = [int(j) for j in col4row]
    total = _fsum_total(costs, g)
    if not _optimum_is_unique(costs, col4row, u, v):
        g = _lexicographic_refine(costs, g, total)
        total = _fsum_total(costs, g)
    return Assignment(g=tuple(g), total_cost=total)


def brute_force_assign(costs: np.ndarray) -> Assignment:
    """Exhaustive minimum over all permutations; oracle for small n.

    Permutations are visited in lexicographic order and replaced only on a
    strictly smaller total, so ties resolve to the lexicographically
    smallest assignment, matching ``hungarian``.
    """
    costs = _validate(costs)
    nr, nc = costs.shape
    if nr > 8:
        raise ValueError(f"brute force refused for n={nr} > 8")
    if nr == 0:
        return Assignment(g=(), total_cost=0.0)
    best_g = None
    best_total = math.inf
    for perm in permutations(range(nc), nr):
        total = _fsum_total(costs, perm)
        if total < best_total:
            best_total = total
            best_g = perm
    return Assignment(g=tuple(best_g), total_cost=best_total)
