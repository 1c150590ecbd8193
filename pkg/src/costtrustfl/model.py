"""Small numpy classifier: softmax regression or a one-hidden-layer tanh MLP.

Parameters live in one flat :class:`ParameterVector`. For the MLP the layout
is ``W1 (feature_dim x hidden_dim, row-major), b1, W2 (hidden_dim x
num_classes), b2`` with two layer segments, ``hidden`` and ``output``; the
softmax model has only the ``output`` segment.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import ConfigurationError, ContractError
from .linalg import ParameterVector


@dataclass(frozen=True)
class ModelSpec:
    feature_dim: int = 32
    hidden_dim: int = 16
    num_classes: int = 10

    def __post_init__(self) -> None:
        if self.feature_dim <= 0 or self.num_classes <= 0 or self.hidden_dim < 0:
            raise ConfigurationError("model dimensions must be positive")

    @property
    def layer_map(self) -> tuple[tuple[str, int, int], ...]:
        if self.hidden_dim == 0:
            return (("output", 0, (self.feature_dim + 1) * self.num_classes),)
        hidden = (self.feature_dim + 1) * self.hidden_dim
        output = (self.hidden_dim + 1) * self.num_classes
        return (("hidden", 0, hidden), ("output", hidden, output))

    @property
    def num_params(self) -> int:
        return sum(length for _, _, length in self.layer_map)


@dataclass(frozen=True)
class TrainConfig:
    local_epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 0.01

    def __post_init__(self) -> None:
        if self.local_epochs <= 0 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise ConfigurationError("local_epochs, batch_size and learning_rate must be positive")


def init_params(spec: ModelSpec, seed: int) -> ParameterVector:
    rng = np.random.default_rng(seed)
    if spec.hidden_dim == 0:
        return ParameterVector(np.zeros(spec.num_params), spec.layer_map)
    w1 = rng.standard_normal((spec.feature_dim, spec.hidden_dim)) / np.sqrt(spec.feature_dim)
    w2 = rng.standard_normal((spec.hidden_dim, spec.num_classes)) / np.sqrt(spec.hidden_dim)
    values = np.concatenate(
        [w1.ravel(), np.zeros(spec.hidden_dim), w2.ravel(), np.zeros(spec.num_classes)]
    )
    return ParameterVector(values, spec.layer_map)


def _unpack(spec: ModelSpec, values: np.ndarray):
    f, h, c = spec.feature_dim, spec.hidden_dim, spec.num_classes
    if h == 0:
        w = values[: f * c].reshape(f, c)
        return None, None, w, values[f * c:]
    i = 0
    w1 = values[i:i + f * h].reshape(f, h); i += f * h
    b1 = values[i:i + h]; i += h
    w2 = values[i:i + h * c].reshape(h, c); i += h * c
    return w1, b1, w2, values[i:]


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check(spec: ModelSpec, values: np.ndarray, batch: Dataset) -> None:
    if values.size != spec.num_params:
        raise ContractError(f"expected {spec.num_params} parameters, got {values.size}")
    if len(batch) == 0:
        raise ContractError("empty batch")
    if batch.feature_dim != spec.feature_dim:
        raise ContractError(f"batch has {batch.feature_dim} features, model expects {spec.feature_dim}")


def _forward(spec: ModelSpec, values: np.ndarray, x: np.ndarray):
    w1, b1, w2, b2 = _unpack(spec, values)
    hidden = x if w1 is None else np.tanh(x @ w1 + b1)
    return hidden, hidden @ w2 + b2


def forward_loss(spec: ModelSpec, w: ParameterVector, batch: Dataset) -> tuple[float, float]:
    """Mean cross-entropy and top-1 accuracy (ties go to the lowest class index)."""
    _check(spec, w.values, batch)
    _, logits = _forward(spec, w.values, batch.features)
    logp = _log_softmax(logits)
    loss = -logp[np.arange(len(batch)), batch.labels].mean()
    acc = (logits.argmax(axis=1) == batch.labels).mean()
    return float(loss), float(acc)


def _grad_values(spec: ModelSpec, values: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    hidden, logits = _forward(spec, values, x)
    probs = np.exp(_log_softmax(logits))
    probs[np.arange(y.size), y] -= 1.0
    delta = probs / y.size
    gw2 = hidden.T @ delta
    gb2 = delta.sum(axis=0)
    if spec.hidden_dim == 0:
        return np.concatenate([gw2.ravel(), gb2])
    _, _, w2, _ = _unpack(spec, values)
    dh = (delta @ w2.T) * (1.0 - hidden ** 2)
    gw1 = x.T @ dh
    gb1 = dh.sum(axis=0)
    return np.concatenate([gw1.ravel(), gb1, gw2.ravel(), gb2])


def gradient(spec: ModelSpec, w: ParameterVector, batch: Dataset) -> ParameterVector:
    """Exact gradient of the mean cross-entropy at ``w``."""
    _check(spec, w.values, batch)
    return ParameterVector(_grad_values(spec, w.values, batch.features, batch.labels), w.layer_map)


def _sgd(spec: ModelSpec, start: np.ndarray, shard: Dataset, cfg: TrainConfig, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    values = start.copy()
    # views into ``values``; in-place updates below keep them in sync
    w1, b1, w2, b2 = _unpack(spec, values)
    lr = cfg.learning_rate
    x_all, y_all = shard.features, shard.labels
    n = len(shard)
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            rows = order[lo:lo + cfg.batch_size]
            x, y = x_all[rows], y_all[rows]
            hidden = x if w1 is None else np.tanh(x @ w1 + b1)
            logits = hidden @ w2 + b2
            logits -= logits.max(axis=1, keepdims=True)
            probs = np.exp(logits)
            probs /= probs.sum(axis=1, keepdims=True)
            probs[np.arange(y.size), y] -= 1.0
            delta = probs / y.size
            if w1 is not None:
                dh = (delta @ w2.T) * (1.0 - hidden * hidden)
                w1 -= lr * (x.T @ dh)
                b1 -= lr * dh.sum(axis=0)
            w2 -= lr * (hidden.T @ delta)
            b2 -= lr * delta.sum(axis=0)
    return values


def local_train(
    spec: ModelSpec, w_global: ParameterVector, shard: Dataset, cfg: TrainConfig, seed: int
) -> ParameterVector:
    """Run local SGD and return the update ``w_global - w_local``.

    An empty shard yields the zero update.
    """
    if len(shard) == 0:
        return w_global.zeros_like()
    if w_global.values.size != spec.num_params:
        raise ContractError(f"expected {spec.num_params} parameters, got {w_global.values.size}")
    local = _sgd(spec, w_global.values, shard, cfg, seed)
    return ParameterVector(w_global.values - local, w_global.layer_map)


def reference_gradient(
    spec: ModelSpec, w_global: ParameterVector, ref_shard: Dataset, cfg: TrainConfig, seed: int
) -> ParameterVector:
    """Server-side update on a clean reference shard; same procedure as a client."""
    if len(ref_shard) == 0:
        raise ConfigurationError("reference shard is empty", field="reference_size")
    return local_train(spec, w_global, ref_shard, cfg, seed)


def derive_seed(seed: int, *keys: int | str) -> int:
    """Stable child seed for a (purpose, client, round, ...) tuple.

    Independent of call order, so clients can train in any order or in
    parallel without changing results.
    """
    words = [int(seed) & 0xFFFFFFFF]
    for key in keys:
        if isinstance(key, str):
            raw = key.encode("utf-8")
            words.append(len(raw))
            words.extend(raw)
        else:
            words.append(int(key) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(words).generate_state(1, dtype=np.uint64)[0] >> 1)
