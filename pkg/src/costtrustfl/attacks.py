"""Poisoning attacks: label flipping on data, noise/sign/scale on updates."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import Dataset
from .economy import CloudTopology
from .errors import ConfigurationError
from .linalg import ParameterVector

ATTACKS = ("none", "label_flip", "gaussian", "sign_flip", "scale")
UPDATE_ATTACKS = ("gaussian", "sign_flip", "scale")


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "none"
    # None means: use the mean benign update norm measured in round 1
    sigma: Optional[float] = None
    scale_factor: float = 10.0
    malicious_fraction: float = 0.3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ATTACKS:
            raise ConfigurationError(f"unknown attack {self.kind!r}; choose from {', '.join(ATTACKS)}", field="attack")
        if self.sigma is not None and self.sigma < 0:
            raise ConfigurationError("sigma must be non-negative", field="sigma")
        if not 0.0 <= self.malicious_fraction <= 1.0:
            raise ConfigurationError("malicious_fraction must lie in [0, 1]", field="malicious_fraction")


def _has_benign_majority(malicious: set[int], topology: CloudTopology) -> bool:
    for k in range(topology.num_clouds):
        members = topology.clients_in(k)
        bad = sum(1 for i in members if i in malicious)
        if len(members) - bad > bad:
            return True
    return False


def assign_malicious(
    num_clients: int, fraction: float, topology: CloudTopology, seed: int, max_tries: int = 10_000
) -> set[int]:
    """Pick ``floor(fraction * N)`` attackers, keeping one cloud with a strict benign majority."""
    if not 0.0 <= fraction <= 1.0:
        raise ConfigurationError("malicious_fraction must lie in [0, 1]", field="malicious_fraction")
    if num_clients != topology.num_clients:
        raise ConfigurationError(f"{num_clients} clients but topology has {topology.num_clients}")
    f = int(np.floor(fraction * num_clients + 1e-9))
    if f == 0:
        return set()
    # the cloud that can shelter the most benign clients once attackers fill the others
    best_cloud, best_bad = None, None
    for k, n_k in enumerate(topology.cloud_sizes()):
        forced = max(0, f - (num_clients - n_k))
        if n_k - forced > forced and (best_bad is None or forced < best_bad):
            best_cloud, best_bad = k, forced
    if best_cloud is None:
        raise ConfigurationError(
            f"{f} malicious clients leave no cloud with a benign majority", field="malicious_fraction"
        )
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        chosen = {int(i) for i in rng.choice(num_clients, size=f, replace=False)}
        if _has_benign_majority(chosen, topology):
            return chosen
    # rejection sampling is hopeless near the feasibility edge; build one directly
    inside = topology.clients_in(best_cloud)
    outside = [i for i in range(num_clients) if i not in set(inside)]
    chosen = set(int(i) for i in rng.choice(outside, size=min(f, len(outside)), replace=False))
    if f > len(outside):
        chosen |= {int(i) for i in rng.choice(inside, size=f - len(outside), replace=False)}
    return chosen


def derangement(num_classes: int, seed: int) -> np.ndarray:
    if num_classes < 2:
        raise ConfigurationError("label flipping needs at least two classes", field="num_classes")
    rng = np.random.default_rng(seed)
    while True:
        perm = rng.permutation(num_classes)
        if np.all(perm != np.arange(num_classes)):
            return perm


def flip_labels(shard: Dataset, num_classes: int, seed: int) -> Dataset:
    """Relabel every sample through a seeded derangement of the class ids."""
    perm = derangement(num_classes, seed)
    return Dataset(shard.features, perm[shard.labels], shard.num_classes, shard.index)


def perturb_update(g: ParameterVector, cfg: AttackConfig, seed: int) -> ParameterVector:
    if cfg.kind == "sign_flip":
        return g.with_values(-g.values)
    if cfg.kind == "scale":
        return g.with_values(cfg.scale_factor * g.values)
    if cfg.kind == "gaussian":
        sigma = 0.0 if cfg.sigma is None else cfg.sigma
        rng = np.random.default_rng(seed)
        return g.with_values(g.values + sigma * rng.standard_normal(len(g)))
    raise ConfigurationError(f"{cfg.kind!r} is not an update-level attack", field="attack")
