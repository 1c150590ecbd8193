"""Gradient-based contribution scores, reputation smoothing and Shapley oracles."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from itertools import combinations
from typing import Callable, Hashable, Sequence

import numpy as np

from .errors import ContractError
from .linalg import ParameterVector, cosine_similarity, l2_norm, layer_slice, mean

MAX_EXACT_PLAYERS = 16

Characteristic = Callable[[frozenset], float]


def contribution_scores(updates: Sequence[ParameterVector], last_layer: bool = True) -> np.ndarray:
    """phi_i = relu(cos(g_i, mean g)) * ||g_i|| on the last-layer slice.

    The mean is unweighted over the supplied updates.
    """
    if not updates:
        raise ContractError("contribution_scores needs at least one update")
    center = layer_slice(mean(updates), last_layer)
    phi = np.empty(len(updates))
    for i, g in enumerate(updates):
        gi = layer_slice(g, last_layer)
        phi[i] = max(0.0, cosine_similarity(gi, center)) * l2_norm(gi)
    return phi


def normalize(phi: Sequence[float]) -> np.ndarray:
    """Scores to shares; all-zero scores fall back to uniform shares."""
    phi = np.asarray(phi, dtype=np.float64)
    if phi.size == 0:
        raise ContractError("cannot normalize an empty score vector")
    if np.any(phi < 0):
        raise ContractError("contribution scores must be non-negative")
    total = phi.sum()
    if total <= 0:
        return np.full(phi.size, 1.0 / phi.size)
    return phi / total


@dataclass(frozen=True, eq=False)
class ReputationState:
    phi: np.ndarray
    r: np.ndarray
    r_hat: np.ndarray
    gamma: float = 0.9

    @classmethod
    def initial(cls, num_clients: int, gamma: float = 0.9) -> "ReputationState":
        if not 0.0 <= gamma < 1.0:
            raise ContractError("gamma must lie in [0, 1)")
        uniform = np.full(num_clients, 1.0 / num_clients)
        return cls(np.zeros(num_clients), uniform.copy(), uniform, gamma)


def ema_update(state: ReputationState, r_new: Sequence[float]) -> ReputationState:
    r_new = np.asarray(r_new, dtype=np.float64)
    if r_new.shape != state.r_hat.shape:
        raise ContractError("reputation vector has the wrong length")
    r_hat = state.gamma * state.r_hat + (1.0 - state.gamma) * r_new
    return replace(state, r=r_new, r_hat=r_hat)


def reputation_round(
    state: ReputationState,
    groups: Sequence[tuple[Sequence[int], Sequence[ParameterVector]]],
    last_layer: bool = True,
) -> ReputationState:
    """Score each group of participants against its own mean and smooth.

    Each group (one cloud's participants) re-divides the reputation mass it
    already holds in proportion to its scores; clients that sat out keep
    their previous value. The fresh vector therefore still sums to one and
    the smoothed vector stays normalized.
    """
    phi = np.zeros_like(state.r_hat)
    r_new = state.r_hat.copy()
    for ids, updates in groups:
        ids = list(ids)
        if not ids:
            continue
        scores = contribution_scores(updates, last_layer)
        phi[ids] = scores
        r_new[ids] = state.r_hat[ids].sum() * normalize(scores)
    return replace(ema_update(state, r_new), phi=phi)


def _check_players(num_clients: int) -> None:
    if num_clients < 1:
        raise ContractError("need at least one player")


def exact_shapley(characteristic: Characteristic, num_clients: int) -> np.ndarray:
    """Shapley values by enumerating every coalition (at most 16 players)."""
    _check_players(num_clients)
    if num_clients > MAX_EXACT_PLAYERS:
        raise ContractError(
            f"exact Shapley over {num_clients} players is intractable; use monte_carlo_shapley"
        )
    n = num_clients
    value: dict[frozenset, float] = {}
    for size in range(n + 1):
        for members in combinations(range(n), size):
            coalition = frozenset(members)
            value[coalition] = float(characteristic(coalition))
    weight = [math.factorial(s) * math.factorial(n - s - 1) / math.factorial(n) for s in range(n)]
    phi = np.zeros(n)
    for i in range(n):
        others = [j for j in range(n) if j != i]
        total = 0.0
        for size in range(n):
            for members in combinations(others, size):
                coalition = frozenset(members)
                total += weight[size] * (value[coalition | {i}] - value[coalition])
        phi[i] = total
    return phi


def monte_carlo_shapley(
    characteristic: Characteristic, num_clients: int, num_permutations: int, seed: int
) -> np.ndarray:
    """Permutation-sampling estimate of the Shapley values.

    Coalition values are memoized, so repeated coalitions cost nothing.
    """
    _check_players(num_clients)
    if num_permutations < 1:
        raise ContractError("num_permutations must be at least 1")
    rng = np.random.default_rng(seed)
    cache: dict[Hashable, float] = {}

    def v(coalition: frozenset) -> float:
        if coalition not in cache:
            cache[coalition] = float(characteristic(coalition))
        return cache[coalition]

    totals = np.zeros(num_clients)
    for _ in range(num_permutations):
        coalition: frozenset = frozenset()
        previous = v(coalition)
        for player in rng.permutation(num_clients):
            coalition = coalition | {int(player)}
            current = v(coalition)
            totals[player] += current - previous
            previous = current
    return totals / num_permutations


def shapley_correlation(approx: Sequence[float], exact: Sequence[float]) -> float:
    """Pearson correlation between two value vectors."""
    a = np.asarray(approx, dtype=np.float64)
    b = np.asarray(exact, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError("value vectors differ in length")
    if a.size < 3:
        raise ContractError("correlation needs at least three players")
    da, db = a - a.mean(), b - b.mean()
    na, nb = np.linalg.norm(da), np.linalg.norm(db)
    if na == 0 or nb == 0:
        raise ContractError("correlation is undefined for a constant vector")
    return float(np.clip(np.dot(da, db) / (na * nb), -1.0, 1.0))
