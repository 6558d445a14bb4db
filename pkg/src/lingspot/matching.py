"""Bipartite matching between predictions (rows) and ground truth (columns)."""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


@dataclass
class MatchAssignment:
    pairs: list[tuple[int, int]]  # (prediction, ground truth), sorted by prediction
    total: float

    @property
    def rows(self) -> list[int]:
        return [r for r, _ in self.pairs]

    @property
    def cols(self) -> list[int]:
        return [c for _, c in self.pairs]


def _solve(cost: np.ndarray) -> Fraction:
    """Exact (rational) total of an optimal assignment of ``cost``."""
    if cost.size == 0:
        return Fraction(0)
    r, c = linear_sum_assignment(cost)
    return sum((Fraction(float(v)) for v in cost[r, c]), Fraction(0))


def _lexicographic(cost: np.ndarray) -> list[tuple[int, int]]:
    """Optimal assignment picking the smallest column for each row in order (n <= m).

    Completion costs are compared as exact rationals, so ties are real ties.
    Columns whose cost plus a row-minimum lower bound already exceeds the
    optimum are skipped without solving the remainder.
    """
    n, _ = cost.shape
    free = list(range(cost.shape[1]))
    budget = _solve(cost)
    # float sums below are within a few ulps of exact; this slack covers that
    slack = 1e-9 * (1.0 + float(np.abs(cost).max()) * n)
    pairs = []
    for i in range(n):
        rest = list(range(i + 1, n))
        bound = float(cost[np.ix_(rest, free)].min(1).sum()) if rest else 0.0
        fbudget = float(budget)
        best_j, best = None, None
        for j in free:
            if best is not None and float(cost[i, j]) + bound > fbudget + slack:
                continue
            head = Fraction(float(cost[i, j]))
            cols = [c for c in free if c != j]
            total = head + (_solve(cost[np.ix_(rest, cols)]) if rest else 0)
            if best is None or total < best:
                best_j, best = j, total
        pairs.append((i, best_j))
        free.remove(best_j)
        budget = best - Fraction(float(cost[i, best_j]))
    return pairs


def hungarian(cost) -> MatchAssignment:
    """Minimum-cost assignment with a deterministic tie-break.

    Among optimal assignments, the one whose pair list along the smaller side
    is lexicographically smallest is returned. ``total`` is the exactly
    rounded sum of the selected entries.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix has non-finite entries")
    n, m = cost.shape
    if n == 0 or m == 0:
        return MatchAssignment([], 0.0)
    if n <= m:
        pairs = _lexicographic(cost)
    else:
        pairs = sorted((r, c) for c, r in _lexicographic(cost.T))
    return MatchAssignment(pairs, math.fsum(cost[r, c] for r, c in pairs))


def focal_class_cost(logits: torch.Tensor, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA):
    """Per-prediction cost of calling it text (lower is better)."""
    p = logits.sigmoid()
    eps = 1e-8
    pos = alpha * (1 - p) ** gamma * -(p + eps).log()
    neg = (1 - alpha) * p**gamma * -(1 - p + eps).log()
    return pos - neg


@torch.no_grad()
def match_cost(
    pred_logits: torch.Tensor,
    pred_points: torch.Tensor,
    gt_points: torch.Tensor,
    w_class: float = 1.0,
    w_points: float = 1.0,
    alpha: float = FOCAL_ALPHA,
    gamma: float = FOCAL_GAMMA,
) -> torch.Tensor:
    """(P, G) cost: focal-style class term plus mean L1 distance between point sets.

    ``pred_points`` is (P, N, 2) and ``gt_points`` is (G, N, 2), in pixels.
    """
    if pred_points.shape[0] == 0 or gt_points.shape[0] == 0:
        raise ValueError("matching cost needs at least one prediction and one target")
    cls = focal_class_cost(pred_logits, alpha, gamma)[:, None]
    l1 = (pred_points[:, None] - gt_points[None]).abs().mean((-1, -2))
    return w_class * cls + w_points * l1
