"""Synthetic data, Dirichlet non-IID partitioning and reference-set carving."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError

if TYPE_CHECKING:
    from .economy import CloudTopology


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    # row ids into the source dataset, used to check disjointness of shards
    index: np.ndarray | None = None

    def __post_init__(self) -> None:
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if features.ndim != 2:
            features = features.reshape(labels.size, -1)
        if features.shape[0] != labels.size:
            raise ContractError(
                f"{features.shape[0]} feature rows but {labels.size} labels"
            )
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ContractError(f"labels must lie in [0, {self.num_classes})")
        index = np.arange(labels.size) if self.index is None else np.asarray(self.index, dtype=np.int64)
        if index.size != labels.size:
            raise ContractError("index length does not match the number of rows")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "index", index)

    def __len__(self) -> int:
        return int(self.labels.size)

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(self.features[rows], self.labels[rows], self.num_classes, self.index[rows])

    def label_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    @classmethod
    def concat(cls, parts: Sequence["Dataset"], num_classes: int, feature_dim: int) -> "Dataset":
        if not parts:
            return cls.empty(num_classes, feature_dim)
        return cls(
            np.concatenate([p.features for p in parts], axis=0),
            np.concatenate([p.labels for p in parts]),
            num_classes,
            np.concatenate([p.index for p in parts]),
        )

    @classmethod
    def empty(cls, num_classes: int, feature_dim: int) -> "Dataset":
        return cls(np.zeros((0, feature_dim)), np.zeros(0, dtype=np.int64), num_classes, np.zeros(0, dtype=np.int64))


class Partition(list):
    """List of client shards that also records which clients got no data."""

    @property
    def empty_clients(self) -> list[int]:
        return [i for i, shard in enumerate(self) if len(shard) == 0]


@dataclass
class FederatedSplit:
    client_shards: list[Dataset]
    reference_shards: list[Dataset]
    empty_clients: list[int] = field(default_factory=list)


def generate_synthetic(
    num_classes: int,
    samples_per_class: int,
    feature_dim: int,
    seed: int,
    center_radius: float = 4.0,
    sigma: float = 1.0,
) -> Dataset:
    """Gaussian class blobs with centers at distance ``center_radius`` from the origin.

    When ``num_classes <= feature_dim`` the centers are an orthonormal frame
    (a regular simplex up to translation), so every pair of classes is equally
    separated. Otherwise they are random points on the sphere.
    """
    if min(num_classes, samples_per_class, feature_dim) <= 0:
        raise ContractError("num_classes, samples_per_class and feature_dim must be positive")
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((feature_dim, num_classes))
    if num_classes <= feature_dim:
        q, r = np.linalg.qr(raw)
        centers = (q * np.sign(np.diag(r))).T
    else:
        centers = (raw / np.linalg.norm(raw, axis=0)).T
    centers = center_radius * centers
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    features = centers[labels] + sigma * rng.standard_normal((labels.size, feature_dim))
    return Dataset(features, labels, num_classes)


def train_test_split(data: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Class-stratified holdout split."""
    if not 0.0 <= test_fraction < 1.0:
        raise ConfigurationError("test_fraction must lie in [0, 1)", field="test_fraction")
    rng = np.random.default_rng(seed)
    test_rows = []
    for c in range(data.num_classes):
        rows = np.flatnonzero(data.labels == c)
        rows = rng.permutation(rows)
        test_rows.append(rows[: int(round(test_fraction * rows.size))])
    test = np.sort(np.concatenate(test_rows)) if test_rows else np.zeros(0, dtype=np.int64)
    train = np.setdiff1d(np.arange(len(data)), test)
    return data.subset(train), data.subset(test)


def dirichlet_partition(data: Dataset, num_clients: int, alpha: float, seed: int) -> Partition:
    """Split each class across clients with proportions drawn from Dir(alpha)."""
    if num_clients < 1:
        raise ContractError("num_clients must be at least 1")
    if alpha <= 0:
        raise ContractError("alpha must be positive")
    rng = np.random.default_rng(seed)
    owned: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    for c in range(data.num_classes):
        rows = rng.permutation(np.flatnonzero(data.labels == c))
        props = rng.dirichlet(np.full(num_clients, alpha))
        cuts = (np.cumsum(props)[:-1] * rows.size).astype(np.int64)
        for client, part in enumerate(np.split(rows, cuts)):
            owned[client].append(part)
    return Partition(
        data.subset(np.sort(np.concatenate(parts))) for parts in owned
    )


def _stratified_quota(available: np.ndarray, size: int) -> np.ndarray:
    """Spread ``size`` draws as evenly as possible over classes, capped by availability."""
    quota = np.zeros_like(available)
    remaining = size
    while remaining > 0:
        open_classes = np.flatnonzero(quota < available)
        if open_classes.size == 0:
            break
        share, extra = divmod(remaining, open_classes.size)
        for rank, c in enumerate(open_classes):
            want = share + (1 if rank < extra else 0)
            take = min(want, available[c] - quota[c])
            quota[c] += take
            remaining -= take
    return quota


def carve_reference(
    shards: Sequence[Dataset],
    topology: "CloudTopology",
    reference_size: int,
    seed: int,
) -> FederatedSplit:
    """Move ``reference_size`` class-balanced samples per cloud into a reference shard."""
    if not shards:
        raise ContractError("no client shards")
    if len(shards) != topology.num_clients:
        raise ContractError(f"{len(shards)} shards for {topology.num_clients} clients")
    num_classes = shards[0].num_classes
    feature_dim = shards[0].feature_dim
    rng = np.random.default_rng(seed)
    clients = list(shards)
    references = []
    for cloud in range(topology.num_clouds):
        members = topology.clients_in(cloud)
        if reference_size == 0:
            references.append(Dataset.empty(num_classes, feature_dim))
            continue
        pooled = [(i, row) for i in members for row in range(len(clients[i]))]
        if len(pooled) < reference_size:
            raise ConfigurationError(
                f"cloud {cloud} holds {len(pooled)} samples, fewer than reference_size={reference_size}",
                field="reference_size",
            )
        owner = np.array([p[0] for p in pooled], dtype=np.int64)
        local_row = np.array([p[1] for p in pooled], dtype=np.int64)
        labels = np.array([clients[i].labels[r] for i, r in pooled], dtype=np.int64)
        available = np.bincount(labels, minlength=num_classes)
        quota = _stratified_quota(available, reference_size)
        picked = []
        for c in range(num_classes):
            if quota[c]:
                candidates = np.flatnonzero(labels == c)
                picked.append(rng.choice(candidates, size=quota[c], replace=False))
        picked = np.sort(np.concatenate(picked))
        references.append(
            Dataset.concat(
                [clients[owner[p]].subset([local_row[p]]) for p in picked], num_classes, feature_dim
            )
        )
        for i in members:
            drop = local_row[picked[owner[picked] == i]]
            if drop.size:
                keep = np.setdiff1d(np.arange(len(clients[i])), drop)
                clients[i] = clients[i].subset(keep)
    empty = [i for i, shard in enumerate(clients) if len(shard) == 0]
    return FederatedSplit(clients, references, empty)


def save_columnar(data: Dataset, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([data.feature_dim, data.num_classes])
        for x, y in zip(data.features, data.labels):
            writer.writerow([repr(float(v)) for v in x] + [int(y)])


def load_columnar(path: str | Path) -> Dataset:
    """Read a dataset written by :func:`save_columnar`.

    First row: ``feature_dim,num_classes``. Every following row holds
    ``feature_dim`` real features followed by one integer label.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
            feature_dim, num_classes = int(header[0]), int(header[1])
        except (StopIteration, IndexError, ValueError) as exc:
            raise ConfigurationError(f"{path}:1: header must be 'feature_dim,num_classes'", line=1) from exc
        features, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != feature_dim + 1:
                raise ConfigurationError(
                    f"{path}:{lineno}: expected {feature_dim + 1} columns, found {len(row)}", line=lineno
                )
            try:
                features.append([float(v) for v in row[:feature_dim]])
                labels.append(int(row[feature_dim]))
            except ValueError as exc:
                raise ConfigurationError(f"{path}:{lineno}: {exc}", line=lineno) from exc
    return Dataset(np.asarray(features).reshape(-1, feature_dim), np.asarray(labels, dtype=np.int64), num_classes)
