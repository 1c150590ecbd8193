"""Check gradient contribution scores against exact and Monte Carlo Shapley values."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .aggregation import aggregate_fedavg
from .config import ExperimentConfig
from .data import Dataset
from .errors import ConfigurationError
from .linalg import ParameterVector
from .model import ModelSpec, derive_seed, forward_loss, local_train
from .orchestrator import initial_state, prepare, run_round
from .reputation import (
    Characteristic,
    contribution_scores,
    exact_shapley,
    monte_carlo_shapley,
    shapley_correlation,
)

MAX_VALIDATION_CLIENTS = 12


def accuracy_game(
    spec: ModelSpec,
    model: ParameterVector,
    updates: Sequence[ParameterVector],
    sample_counts: Sequence[int],
    validation: Dataset,
    eta: float = 1.0,
) -> Characteristic:
    """v(S): validation accuracy after applying the FedAvg step of coalition S.

    v(empty) is the accuracy of the unmodified model.
    """

    def v(coalition: frozenset) -> float:
        members = sorted(coalition)
        if not members:
            return forward_loss(spec, model, validation)[1]
        counts = [sample_counts[i] for i in members]
        if sum(counts) == 0:
            counts = [1] * len(members)
        step = aggregate_fedavg([updates[i] for i in members], counts)
        return forward_loss(spec, model.with_values(model.values - eta * step.values), validation)[1]

    return v


@dataclass
class ShapleyReport:
    num_clients: int
    at_round: int
    phi: np.ndarray
    exact: np.ndarray
    monte_carlo: np.ndarray
    corr_phi_exact: float
    corr_mc_exact: float
    mc_max_abs_error: float
    seconds_phi: float
    seconds_exact: float
    seconds_mc: float


def validation_config(base: ExperimentConfig, num_clients: int, at_round: int) -> ExperimentConfig:
    """Single cloud, full participation, benign clients."""
    if not 2 <= num_clients <= MAX_VALIDATION_CLIENTS:
        raise ConfigurationError(
            f"Shapley validation supports 2..{MAX_VALIDATION_CLIENTS} clients", field="num_clients"
        )
    if at_round < 1:
        raise ConfigurationError("validation round must be at least 1", field="round")
    return base.replace(
        num_clouds=1,
        clients_per_cloud=num_clients,
        participants_per_cloud=num_clients,
        attack="none",
        strategy="cost_trustfl",
        rounds=at_round,
    )


def shapley_validation(
    base: ExperimentConfig, num_clients: int = 8, at_round: int = 10, permutations: int = 5000
) -> ShapleyReport:
    cfg = validation_config(base, num_clients, at_round)
    setup = prepare(cfg)
    state = initial_state(setup)
    for _ in range(at_round - 1):
        state, _ = run_round(state, setup)

    updates = [
        local_train(setup.spec, state.model, shard, setup.train_cfg, derive_seed(cfg.seed, "train", i, at_round))
        for i, shard in enumerate(setup.client_shards)
    ]
    counts = [len(s) for s in setup.client_shards]
    game = accuracy_game(setup.spec, state.model, updates, counts, setup.test, cfg.eta)

    t0 = time.perf_counter()
    phi = contribution_scores(updates, last_layer=not cfg.full_vector_cosine)
    t1 = time.perf_counter()
    exact = exact_shapley(game, num_clients)
    t2 = time.perf_counter()
    mc = monte_carlo_shapley(game, num_clients, permutations, derive_seed(cfg.seed, "shapley-mc"))
    t3 = time.perf_counter()
    return ShapleyReport(
        num_clients=num_clients,
        at_round=at_round,
        phi=phi,
        exact=exact,
        monte_carlo=mc,
        corr_phi_exact=shapley_correlation(phi, exact),
        corr_mc_exact=shapley_correlation(mc, exact),
        mc_max_abs_error=float(np.max(np.abs(mc - exact))),
        seconds_phi=t1 - t0,
        seconds_exact=t2 - t1,
        seconds_mc=t3 - t2,
    )
