"""Round loop: per-cloud selection, local training, reputation, trust aggregation, global step."""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from . import aggregation as agg
from .attacks import UPDATE_ATTACKS, AttackConfig, assign_malicious, flip_labels, perturb_update
from .config import ExperimentConfig
from .data import Dataset, carve_reference, dirichlet_partition, generate_synthetic, load_columnar, train_test_split
from .economy import (
    CloudTopology,
    CostLedger,
    params_to_gb,
    random_selection,
    record_round,
    round_cost,
    select_clients,
)
from .errors import ConfigurationError, InvariantError
from .linalg import ParameterVector, l2_norm, mean, weighted_sum
from .model import ModelSpec, TrainConfig, derive_seed, forward_loss, init_params, local_train, reference_gradient
from .reputation import ReputationState, reputation_round

log = logging.getLogger(__name__)

TRUST_STRATEGIES = ("fltrust", "cost_trustfl")


@dataclass
class Setup:
    """Everything fixed before round 1: data, topology, attackers, initial model."""

    config: ExperimentConfig
    spec: ModelSpec
    train_cfg: TrainConfig
    topology: CloudTopology
    client_shards: list[Dataset]
    reference_shards: list[Dataset]
    test: Dataset
    malicious: frozenset[int]
    initial_model: ParameterVector
    empty_clients: list[int] = field(default_factory=list)

    @property
    def model_size(self) -> float:
        return params_to_gb(self.spec.num_params)


@dataclass
class RoundState:
    round: int
    model: ParameterVector
    reputation: ReputationState
    ledger: CostLedger
    sigma: Optional[float] = None


@dataclass(frozen=True, eq=False)
class RoundMetrics:
    round: int
    accuracy: float
    loss: float
    selected: tuple[int, ...]
    trust: np.ndarray
    r_hat: np.ndarray
    beta: tuple[float, ...]
    cost_round: float
    cost_intra: float
    cost_cross: float
    cost_cum: float

    def row(self) -> list:
        return [
            self.round, self.accuracy, self.loss, self.cost_round, self.cost_cum,
            self.cost_intra, self.cost_cross, len(self.selected), *self.beta,
        ]


def prepare(config: ExperimentConfig) -> Setup:
    seed = config.seed
    if config.data_path:
        data = load_columnar(config.data_path)
    else:
        data = generate_synthetic(
            config.num_classes, config.samples_per_class, config.feature_dim, derive_seed(seed, "data")
        )
    train, test = train_test_split(data, config.test_fraction, derive_seed(seed, "split"))
    topology = CloudTopology.uniform(
        config.num_clouds,
        config.clients_per_cloud,
        config.c_intra,
        config.c_cross,
        config.remote_fraction,
        config.global_home,
        seed=derive_seed(seed, "hosts"),
    )
    shards = dirichlet_partition(train, topology.num_clients, config.alpha, derive_seed(seed, "partition"))
    split = carve_reference(shards, topology, config.reference_size, derive_seed(seed, "reference"))
    malicious: set[int] = set()
    if config.attack != "none":
        malicious = assign_malicious(
            topology.num_clients, config.malicious_fraction, topology, derive_seed(seed, "malicious")
        )
    clients = list(split.client_shards)
    if config.attack == "label_flip":
        flip_seed = derive_seed(seed, "flip")
        for i in sorted(malicious):
            clients[i] = flip_labels(clients[i], data.num_classes, flip_seed)
    spec = ModelSpec(data.feature_dim, config.hidden_dim, data.num_classes)
    return Setup(
        config=config,
        spec=spec,
        train_cfg=TrainConfig(config.local_epochs, config.batch_size, config.learning_rate),
        topology=topology,
        client_shards=clients,
        reference_shards=split.reference_shards,
        test=test,
        malicious=frozenset(malicious),
        initial_model=init_params(spec, derive_seed(seed, "init")),
        empty_clients=split.empty_clients,
    )


def initial_state(setup: Setup) -> RoundState:
    cfg = setup.config
    return RoundState(
        round=0,
        model=setup.initial_model,
        reputation=ReputationState.initial(setup.topology.num_clients, cfg.gamma),
        ledger=CostLedger(),
        sigma=cfg.sigma,
    )


def _uses_cost_aware_selection(cfg: ExperimentConfig) -> bool:
    return cfg.strategy == "cost_trustfl" and cfg.cost_aware_selection


def select_round(setup: Setup, state: RoundState, t: int) -> list[list[int]]:
    """Participants per cloud, in ascending client id."""
    cfg, topo = setup.config, setup.topology
    chosen = []
    for k in range(topo.num_clouds):
        members = topo.clients_in(k)
        m = min(cfg.participants, len(members))
        if _uses_cost_aware_selection(cfg):
            picked = select_clients(
                state.reputation.r_hat, topo, m, cfg.lam, candidates=members, hierarchical=cfg.hierarchical
            )
        else:
            picked = random_selection(members, m, derive_seed(cfg.seed, "select", t, k))
        chosen.append(sorted(picked))
    return chosen


def random_selection_cost(config: ExperimentConfig) -> float:
    """Cumulative cost of random per-cloud selection: the relative-cost denominator.

    Random selection draws from its own seed stream, so this needs no training.
    """
    topo = CloudTopology.uniform(
        config.num_clouds, config.clients_per_cloud, config.c_intra, config.c_cross,
        config.remote_fraction, config.global_home, seed=derive_seed(config.seed, "hosts"),
    )
    size = params_to_gb(ModelSpec(config.feature_dim, config.hidden_dim, config.num_classes).num_params)
    total = 0.0
    for t in range(1, config.rounds + 1):
        selected = []
        for k in range(topo.num_clouds):
            members = topo.clients_in(k)
            selected += random_selection(members, min(config.participants, len(members)), derive_seed(config.seed, "select", t, k))
        total += round_cost(
            selected, size, topo, hierarchical=config.hierarchical,
            charge_edge_legs=config.charge_edge_legs, charge_downlink=config.charge_downlink,
        ).total
    return total


def _client_updates(setup: Setup, state: RoundState, ids: Sequence[int], t: int) -> list[ParameterVector]:
    cfg = setup.config
    return [
        local_train(setup.spec, state.model, setup.client_shards[i], setup.train_cfg, derive_seed(cfg.seed, "train", i, t))
        for i in ids
    ]


def _apply_update_attacks(
    setup: Setup, state: RoundState, ids: Sequence[int], updates: list[ParameterVector], t: int
) -> tuple[list[ParameterVector], Optional[float]]:
    cfg = setup.config
    if cfg.attack not in UPDATE_ATTACKS:
        return updates, state.sigma
    sigma = state.sigma
    if cfg.attack == "gaussian" and sigma is None:
        benign = [l2_norm(u) for i, u in zip(ids, updates) if i not in setup.malicious]
        sigma = float(np.mean(benign)) if benign else float(np.mean([l2_norm(u) for u in updates]))
        log.info("gaussian attack sigma fixed at %.6g from round-%d benign update norms", sigma, t)
    attack = AttackConfig(cfg.attack, sigma, cfg.scale_factor, cfg.malicious_fraction)
    out = [
        perturb_update(u, attack, derive_seed(cfg.seed, "attack", i, t)) if i in setup.malicious else u
        for i, u in zip(ids, updates)
    ]
    return out, sigma


def _reference(setup: Setup, state: RoundState, group: int, t: int) -> ParameterVector:
    """Cloud reference update; without hierarchy, the mean of all cloud references."""
    cfg = setup.config
    clouds = [group] if cfg.hierarchical else range(setup.topology.num_clouds)
    refs = [
        reference_gradient(
            setup.spec, state.model, setup.reference_shards[k], setup.train_cfg, derive_seed(cfg.seed, "ref", k, t)
        )
        for k in clouds
    ]
    return refs[0] if len(refs) == 1 else mean(refs)


def run_round(state: RoundState, setup: Setup) -> tuple[RoundState, RoundMetrics]:
    cfg, topo = setup.config, setup.topology
    t = state.round + 1
    per_cloud = select_round(setup, state, t)
    selected = [i for ids in per_cloud for i in ids]

    raw = _client_updates(setup, state, selected, t)
    updates, sigma = _apply_update_attacks(setup, state, selected, raw, t)
    by_client = dict(zip(selected, updates))

    groups = per_cloud if cfg.hierarchical else [selected]
    group_updates = [[by_client[i] for i in ids] for ids in groups]
    reputation = reputation_round(
        state.reputation, list(zip(groups, group_updates)), last_layer=not cfg.full_vector_cosine
    )

    needs_ref = cfg.strategy in TRUST_STRATEGIES
    trust = np.zeros(topo.num_clients)
    edge_updates, refs, sample_totals = [], [], []
    for g, (ids, ups) in enumerate(zip(groups, group_updates)):
        counts = [len(setup.client_shards[i]) for i in ids]
        ref = _reference(setup, state, g, t) if needs_ref else None
        if cfg.strategy == "cost_trustfl" and cfg.shapley_weighting:
            r_hat = reputation.r_hat[ids]
        else:
            r_hat = np.full(len(ids), 1.0 / len(ids))
        ctx = agg.AggregationContext(
            sample_counts=counts if sum(counts) > 0 else [1] * len(ids),
            ref_update=ref,
            r_hat=r_hat,
            trim_fraction=cfg.trim_fraction,
            krum_f=cfg.krum_f if cfg.krum_f is not None else int(np.floor(cfg.malicious_fraction * len(ids))),
            normalize=cfg.trust_normalization,
            last_layer=not cfg.full_vector_cosine,
        )
        result = agg.aggregate(cfg.strategy, ups, ctx)
        if result.trust is not None:
            trust[ids] = result.trust
        edge_updates.append(result.update)
        refs.append(ref)
        sample_totals.append(sum(counts))

    if not cfg.hierarchical:
        step, beta = edge_updates[0], tuple(float("nan") for _ in range(topo.num_clouds))
    elif cfg.strategy == "cost_trustfl":
        step, b = agg.aggregate_crosscloud(edge_updates, refs, topo.cloud_sizes())
        beta = tuple(float(x) for x in b)
    else:
        total = float(sum(sample_totals))
        b = [s / total for s in sample_totals] if total > 0 else [1.0 / len(edge_updates)] * len(edge_updates)
        step, beta = weighted_sum(edge_updates, b), tuple(float(x) for x in b)

    model = state.model.with_values(state.model.values - cfg.eta * step.values)
    cost = round_cost(
        selected, setup.model_size, topo, hierarchical=cfg.hierarchical,
        charge_edge_legs=cfg.charge_edge_legs, charge_downlink=cfg.charge_downlink,
    )
    ledger = record_round(state.ledger, cost)
    loss, acc = forward_loss(setup.spec, model, setup.test)

    if abs(reputation.r_hat.sum() - 1.0) > 1e-9:
        raise InvariantError(f"round {t}: reputation sums to {reputation.r_hat.sum()!r}")
    if any(len(ids) > cfg.participants for ids in per_cloud):
        raise InvariantError(f"round {t}: more than {cfg.participants} participants in a cloud")

    metrics = RoundMetrics(
        round=t,
        accuracy=acc,
        loss=loss,
        selected=tuple(selected),
        trust=trust,
        r_hat=reputation.r_hat.copy(),
        beta=beta,
        cost_round=cost.total,
        cost_intra=cost.intra,
        cost_cross=cost.cross,
        cost_cum=ledger.cumulative,
    )
    return RoundState(t, model, reputation, ledger, sigma), metrics


def iterate_rounds(config: ExperimentConfig, setup: Optional[Setup] = None) -> Iterator[tuple[RoundState, RoundMetrics]]:
    setup = setup or prepare(config)
    state = initial_state(setup)
    for _ in range(config.rounds):
        state, metrics = run_round(state, setup)
        yield state, metrics


def run_experiment(config: ExperimentConfig) -> list[RoundMetrics]:
    return [metrics for _, metrics in iterate_rounds(config)]


ABLATIONS: dict[str, dict[str, bool]] = {
    "full": {},
    "no_shapley_weighting": {"shapley_weighting": False},
    "no_cost_aware_selection": {"cost_aware_selection": False},
    "no_hierarchical": {"hierarchical": False},
    "no_trust_normalization": {"trust_normalization": False},
}


@dataclass
class ComparisonTable:
    """Final accuracy per (row, attack) and relative cost per row."""

    rows: list[str]
    attacks: list[str]
    accuracy: dict[tuple[str, str], float]
    relative_cost: dict[str, float]

    def header(self) -> list[str]:
        return ["name", *self.attacks, "rel_cost"]

    def records(self) -> list[list]:
        return [[r, *(self.accuracy[(r, a)] for a in self.attacks), self.relative_cost[r]] for r in self.rows]


def _final(config: ExperimentConfig) -> RoundMetrics:
    return run_experiment(config)[-1]


def _table(configs: dict[str, ExperimentConfig], attacks: Sequence[str]) -> ComparisonTable:
    accuracy, rel = {}, {}
    for name, cfg in configs.items():
        ratios = []
        for attack in attacks:
            run_cfg = cfg.replace(attack=attack)
            last = _final(run_cfg)
            accuracy[(name, attack)] = last.accuracy
            ratios.append(last.cost_cum / random_selection_cost(run_cfg))
        rel[name] = float(np.mean(ratios))
    return ComparisonTable(list(configs), list(attacks), accuracy, rel)


def run_comparison(config: ExperimentConfig, strategies: Sequence[str], attacks: Sequence[str] = ("none",)) -> ComparisonTable:
    """Strategy x attack grid on identical data, seeds and attacker assignment."""
    return _table({s: config.replace(strategy=s) for s in strategies}, attacks)


def run_ablation(config: ExperimentConfig, attacks: Sequence[str] = ("sign_flip",)) -> ComparisonTable:
    base = config.replace(strategy="cost_trustfl")
    return _table({name: base.replace(**flags) for name, flags in ABLATIONS.items()}, attacks)


SWEEP_PARAMS = ("lambda", "malicious_fraction", "alpha")


def _sweep_point(job: tuple[ExperimentConfig, str, float]) -> tuple[float, float, float]:
    config, param, value = job
    last = _final(config.replace(**{param: value}))
    return value, last.accuracy, last.cost_cum


def run_sweep(
    config: ExperimentConfig, param: str, values: Sequence[float], jobs: int = 1
) -> list[tuple[float, float, float]]:
    """(value, final accuracy, cumulative cost) per value, in input order.

    With ``jobs > 1`` runs go to worker processes; each run is seeded from the
    config alone, so the rows do not depend on scheduling.
    """
    if param not in SWEEP_PARAMS:
        raise ConfigurationError(f"cannot sweep {param!r}; choose from {', '.join(SWEEP_PARAMS)}", field=param)
    for value in values:
        config.replace(**{param: value})  # validate every point before running any
    points = [(config, param, v) for v in values]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_sweep_point, points))
    return [_sweep_point(p) for p in points]
