"""Multi-cloud egress cost model, cost ledger and cost-aware client selection."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import ConfigurationError

BYTES_PER_PARAM = 4
BYTES_PER_GB = 1e9
# host id of a site outside every cloud
OFF_CLOUD = -1


@dataclass(frozen=True)
class CloudTopology:
    """Clients grouped into clouds, each cloud running its own edge aggregator.

    ``client_host`` is the cloud that physically hosts a client. It normally
    equals ``client_cloud``; a client hosted elsewhere (for instance an
    on-premise site attached to the nearest cloud region) pays the cross-cloud
    price on its uplink. ``global_home`` is the cloud hosting the global
    aggregator, or ``None`` for a location outside every cloud.
    """

    num_clouds: int
    client_cloud: tuple[int, ...]
    c_intra: float = 0.01
    c_cross: float = 0.09
    client_host: tuple[int, ...] | None = None
    global_home: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "client_cloud", tuple(int(k) for k in self.client_cloud))
        host = self.client_cloud if self.client_host is None else tuple(int(k) for k in self.client_host)
        object.__setattr__(self, "client_host", host)
        if self.num_clouds < 1:
            raise ConfigurationError("num_clouds must be at least 1", field="num_clouds")
        if len(host) != len(self.client_cloud):
            raise ConfigurationError("client_host and client_cloud differ in length")
        if any(not 0 <= k < self.num_clouds for k in self.client_cloud):
            raise ConfigurationError("every client must map to a valid cloud")
        if self.c_intra < 0 or self.c_cross < self.c_intra:
            raise ConfigurationError("prices must satisfy 0 <= c_intra <= c_cross", field="c_cross")
        if self.global_home is not None and not 0 <= self.global_home < self.num_clouds:
            raise ConfigurationError("global_home must be a cloud id or None", field="global_home")

    @classmethod
    def uniform(
        cls,
        num_clouds: int,
        clients_per_cloud: int,
        c_intra: float = 0.01,
        c_cross: float = 0.09,
        remote_fraction: float = 0.0,
        global_home: int | None = None,
        seed: int = 0,
    ) -> "CloudTopology":
        """Equal-size clouds; ``round(remote_fraction * n_k)`` clients per cloud are hosted off-cloud."""
        client_cloud = tuple(k for k in range(num_clouds) for _ in range(clients_per_cloud))
        host = list(client_cloud)
        n_remote = int(round(remote_fraction * clients_per_cloud))
        rng = np.random.default_rng(seed)
        for k in range(num_clouds):
            members = [i for i, c in enumerate(client_cloud) if c == k]
            if n_remote:
                for i in rng.choice(members, size=n_remote, replace=False):
                    host[int(i)] = OFF_CLOUD
        return cls(num_clouds, client_cloud, c_intra, c_cross, tuple(host), global_home)

    @property
    def num_clients(self) -> int:
        return len(self.client_cloud)

    def clients_in(self, cloud: int) -> list[int]:
        return [i for i, k in enumerate(self.client_cloud) if k == cloud]

    def cloud_sizes(self) -> list[int]:
        return [len(self.clients_in(k)) for k in range(self.num_clouds)]

    def is_remote(self, client: int) -> bool:
        return self.client_host[client] != self.client_cloud[client]


class RoundCost(NamedTuple):
    total: float
    intra: float
    cross: float


def client_cost(client: int, topology: CloudTopology, hierarchical: bool = True) -> float:
    """Per-unit price of a client's uplink.

    With hierarchical aggregation the uplink goes to the client's own edge
    aggregator; without it, straight to the global aggregator.
    """
    return topology.c_intra if _client_leg_intra(client, topology, hierarchical) else topology.c_cross


def _client_leg_intra(client: int, topology: CloudTopology, hierarchical: bool) -> bool:
    target = topology.client_cloud[client] if hierarchical else topology.global_home
    return topology.client_host[client] == target


def edge_cost(cloud: int, topology: CloudTopology) -> float:
    """Per-unit price of the edge-to-global leg of ``cloud``."""
    return topology.c_intra if cloud == topology.global_home else topology.c_cross


def round_cost(
    selected: Iterable[int],
    model_size: float,
    topology: CloudTopology,
    *,
    hierarchical: bool = True,
    charge_edge_legs: bool = True,
    charge_downlink: bool = False,
) -> RoundCost:
    """Egress cost of one round; ``model_size`` is in the price's transfer unit."""
    selected = sorted(set(selected))
    if not selected:
        return RoundCost(0.0, 0.0, 0.0)
    if model_size <= 0:
        raise ConfigurationError("model size must be positive")
    intra = cross = 0.0
    for i in selected:
        if _client_leg_intra(i, topology, hierarchical):
            intra += model_size * topology.c_intra
        else:
            cross += model_size * topology.c_cross
    if hierarchical and charge_edge_legs:
        for k in sorted({topology.client_cloud[i] for i in selected}):
            if k == topology.global_home:
                intra += model_size * topology.c_intra
            else:
                cross += model_size * topology.c_cross
    if charge_downlink:
        intra, cross = 2 * intra, 2 * cross
    return RoundCost(intra + cross, intra, cross)


def full_participation_cost(model_size: float, topology: CloudTopology) -> float:
    """Closed form: every client plus every edge leg, all hosts local."""
    sizes = topology.cloud_sizes()
    edges = sum(edge_cost(k, topology) for k in range(topology.num_clouds))
    return model_size * (sum(sizes) * topology.c_intra + edges)


def params_to_gb(num_params: int) -> float:
    return num_params * BYTES_PER_PARAM / BYTES_PER_GB


def selection_scores(
    r_hat: Sequence[float], topology: CloudTopology, lam: float, hierarchical: bool = True
) -> np.ndarray:
    """score_i = r_hat_i / c_i ** lam; lam=1 is reputation per unit cost, lam=0 reputation only."""
    r = np.asarray(r_hat, dtype=np.float64)
    costs = np.array([client_cost(i, topology, hierarchical) for i in range(topology.num_clients)])
    with np.errstate(divide="ignore"):
        return r / np.power(costs, lam)


def select_clients(
    r_hat: Sequence[float],
    topology: CloudTopology,
    m: int,
    lam: float,
    seed: int = 0,
    candidates: Sequence[int] | None = None,
    hierarchical: bool = True,
) -> set[int]:
    """Greedy top-``m`` clients by reputation per unit cost.

    Ties go to the lower client id, so the result is deterministic and
    ``seed`` is accepted only for interface parity with random selection.
    """
    if lam < 0:
        raise ConfigurationError("lambda must be non-negative", field="lambda")
    pool = list(range(topology.num_clients)) if candidates is None else sorted(candidates)
    if not 1 <= m <= len(pool):
        raise ConfigurationError(f"m={m} must lie in [1, {len(pool)}]", field="participants_per_cloud")
    scores = selection_scores(r_hat, topology, lam, hierarchical)
    ranked = sorted(pool, key=lambda i: (-scores[i], i))
    return set(ranked[:m])


def random_selection(candidates: Sequence[int], m: int, seed: int) -> set[int]:
    pool = sorted(candidates)
    if not 1 <= m <= len(pool):
        raise ConfigurationError(f"m={m} must lie in [1, {len(pool)}]", field="participants_per_cloud")
    rng = np.random.default_rng(seed)
    return {int(i) for i in rng.choice(pool, size=m, replace=False)}


def default_participants(cloud_size: int) -> int:
    return max(1, math.ceil(0.5 * cloud_size))


@dataclass
class CostLedger:
    per_round: list[float] = field(default_factory=list)
    breakdown: list[tuple[float, float]] = field(default_factory=list)
    cumulative: float = 0.0


def record_round(ledger: CostLedger, cost: RoundCost) -> CostLedger:
    return CostLedger(
        ledger.per_round + [cost.total],
        ledger.breakdown + [(cost.intra, cost.cross)],
        ledger.cumulative + cost.total,
    )
