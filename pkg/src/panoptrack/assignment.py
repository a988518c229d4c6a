"""Rectangular assignment with forbidden pairs and deterministic tie-breaking."""
import numpy as np
from scipy.optimize import linear_sum_assignment

from .exceptions import MalformedInputError

_REL_TOL = 1e-9


def _augmented(cost, allowed, unmatched_cost):
    """Square (n+m) problem where dummy rows/columns absorb unmatched items."""
    n, m = cost.shape
    big = np.full((n + m, n + m), np.inf)
    big[:n, :m] = np.where(allowed, cost, np.inf)
    big[np.arange(n), m + np.arange(n)] = unmatched_cost
    big[n + np.arange(m), np.arange(m)] = unmatched_cost
    big[n:, m:] = 0.0
    return big


def _solve(big):
    rows, cols = linear_sum_assignment(big)
    return big[rows, cols].sum(), dict(zip(rows.tolist(), cols.tolist()))


def assignment_solve(cost, forbidden=None, maximize_matches=True):
    """Optimal one-to-one matching over the allowed pairs of ``cost``.

    With ``maximize_matches`` (the default) the matching first uses as many
    allowed pairs as possible, then minimises total cost.  Otherwise leaving
    a row or column unmatched costs nothing, so only pairs with negative cost
    can improve the total.  Among equally good matchings the one that gives
    each row, in order, the lowest column index wins.

    Returns a list of ``(row, col)`` pairs sorted by row.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise MalformedInputError(f"cost must be 2-D, got shape {cost.shape}")
    n, m = cost.shape
    allowed = np.ones((n, m), bool) if forbidden is None else ~np.asarray(forbidden, bool)
    if allowed.shape != cost.shape:
        raise MalformedInputError("forbidden mask must match the cost matrix shape")
    if not np.isfinite(cost[allowed]).all():
        raise MalformedInputError("allowed costs must be finite")
    if n == 0 or m == 0 or not allowed.any():
        return []

    if maximize_matches:
        # one unmatched side costs more than any swing in matched cost
        unmatched = 2.0 * (np.abs(cost[allowed]).sum() + 1.0)
    else:
        unmatched = 0.0
    big = _augmented(cost, allowed, unmatched)
    best, assign = _solve(big)
    tol = _REL_TOL * (1.0 + abs(best))

    # Lowest-index refinement: walk rows in order and try to pin each one to
    # an earlier column than it currently has without losing optimality.
    for i in range(n):
        current = assign[i]
        candidates = [j for j in range(min(current, m)) if allowed[i, j]]
        for j in candidates:
            trial = big.copy()
            trial[i, :] = np.inf
            trial[:, j] = np.inf
            trial[i, j] = big[i, j]
            total, trial_assign = _solve_or_none(trial)
            if total is not None and total <= best + tol:
                assign = trial_assign
                break
        # freeze row i at its final column for later rows
        col = assign[i]
        keep = big[i, col]
        big[i, :] = np.inf
        big[:, col] = np.inf
        big[i, col] = keep
    return sorted((i, j) for i, j in assign.items() if i < n and j < m)


def _solve_or_none(big):
    try:
        return _solve(big)
    except ValueError:
        return None, None
