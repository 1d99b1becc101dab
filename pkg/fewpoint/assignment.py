# This work is marked with CC0 1.0 Universal.
# To view a copy of this license, visit https://creativecommons.org/publicdomain/zero/1.0/
"""
Linear assignment solvers on square cost matrices.

* :func:`hungarian` is exact, O(n^3), shortest augmenting paths with row/column potentials.
* :func:`auction` is the bidding method with epsilon scaling. It stops as soon as the primal cost is within a
  factor (1 + epsilon) of the dual lower bound given by the current prices, which bounds the ratio to the optimum.
"""

import logging

import numpy as np

from fewpoint.errors import ContractError, ConvergenceError

logger = logging.getLogger(__name__)

DEFAULT_MAX_ROUNDS = 200_000


def _check_square(cost: np.ndarray) -> np.ndarray:
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1] or cost.shape[0] == 0:
        raise ContractError(f"assignment needs a non-empty square cost matrix, got shape {cost.shape}")
    return cost


def hungarian(cost: np.ndarray) -> np.ndarray:
    """
    Optimal assignment.

    :param cost: (n, n) cost matrix.
    :return: The column assigned to each row.
    """
    cost = _check_square(cost)
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    # column j (1-based) is matched to row owner[j] (1-based), 0 is the virtual column of the current root
    owner = np.zeros(n + 1, dtype=np.intp)
    way = np.zeros(n + 1, dtype=np.intp)
    for row in range(1, n + 1):
        owner[0] = row
        column = 0
        min_slack = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[column] = True
            current_row = owner[column]
            free = ~used[1:]
            slack = cost[current_row - 1] - u[current_row] - v[1:]
            better = free & (slack < min_slack[1:])
            min_slack[1:][better] = slack[better]
            way[1:][better] = column
            candidates = np.where(free, min_slack[1:], np.inf)
            next_column = int(np.argmin(candidates)) + 1
            delta = candidates[next_column - 1]
            used_columns = np.flatnonzero(used)
            u[owner[used_columns]] += delta
            v[used_columns] -= delta
            min_slack[1:][free] -= delta
            column = next_column
            if owner[column] == 0:
                break
        while column:
            previous = way[column]
            owner[column] = owner[previous]
            column = previous
    assignment = np.empty(n, dtype=np.intp)
    assignment[owner[1:] - 1] = np.arange(n)
    return assignment


def dual_lower_bound(cost: np.ndarray, prices: np.ndarray) -> float:
    """Lower bound on the optimal assignment cost given column prices (weak duality)."""
    return float(np.sum(np.min(cost + prices[None, :], axis=1)) - np.sum(prices))


def auction(cost: np.ndarray,
            epsilon: float,
            scaling: float = 5.0,
            max_rounds: int = DEFAULT_MAX_ROUNDS) -> np.ndarray:
    """
    Assignment within a factor (1 + epsilon) of the optimal cost.

    All unassigned rows bid at once (Jacobi bidding); each column goes to its highest bid, ties to the lowest
    row index.

    :param cost: (n, n) non-negative cost matrix.
    :param epsilon: Relative tolerance, > 0.
    :param scaling: Factor dividing the bid increment between phases.
    :param max_rounds: Total bidding rounds before giving up.
    :return: The column assigned to each row.
    """
    cost = _check_square(cost)
    if epsilon <= 0:
        raise ContractError(f"auction epsilon must be > 0, got {epsilon}")
    n = cost.shape[0]
    spread = float(cost.max() - cost.min())
    if n == 1 or spread == 0.0:
        return np.arange(n, dtype=np.intp)

    benefit = -cost
    prices = np.zeros(n)
    increment = spread / 4.0
    rounds = 0
    phase = 0
    while True:
        phase += 1
        owner = np.full(n, -1, dtype=np.intp)
        assigned = np.full(n, -1, dtype=np.intp)
        while (bidders := np.flatnonzero(assigned < 0)).size:
            rounds += 1
            if rounds > max_rounds:
                raise ConvergenceError(f"auction did not converge within {max_rounds} rounds "
                                       f"(n={n}, phase={phase}, increment={increment:.3e})")
            values = benefit[bidders] - prices[None, :]
            best = np.argmax(values, axis=1)
            positions = np.arange(bidders.size)
            best_value = values[positions, best]
            values[positions, best] = -np.inf
            second_value = values.max(axis=1)
            bids = prices[best] + (best_value - second_value) + increment

            order = np.lexsort((-bids, best))
            targets = best[order]
            first = np.ones(order.size, dtype=bool)
            first[1:] = targets[1:] != targets[:-1]
            winners = order[first]
            columns = best[winners]
            evicted = owner[columns]
            assigned[evicted[evicted >= 0]] = -1
            owner[columns] = bidders[winners]
            assigned[bidders[winners]] = columns
            prices[columns] = bids[winners]

        primal = float(np.sum(cost[np.arange(n), assigned]))
        lower = dual_lower_bound(cost, prices)
        logger.debug(f"auction_phase {phase=} {rounds=} {increment=:.3e} {primal=:.6g} {lower=:.6g}")
        if primal == 0.0 or primal <= (1.0 + epsilon) * lower:
            return assigned
        increment /= scaling
