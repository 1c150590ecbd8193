"""Flat parameter vectors with named layer segments.

Every model parameter set, client update and aggregate in the simulator is a
:class:`ParameterVector`: a read-only float64 array plus a layer map that
lets callers slice out the final layer without knowing the architecture.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError

EPS_NORM = 1e-12

LayerMap = tuple[tuple[str, int, int], ...]


@dataclass(frozen=True, eq=False)
class ParameterVector:
    values: np.ndarray
    layer_map: LayerMap

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        values.flags.writeable = False
        layer_map = tuple((str(n), int(s), int(l)) for n, s, l in self.layer_map)
        offset = 0
        for name, start, length in layer_map:
            if start != offset or length < 0:
                raise ContractError(f"layer {name!r} is not contiguous at offset {offset}")
            offset += length
        if offset != values.size:
            raise ContractError(
                f"layer map covers {offset} entries but vector has {values.size}"
            )
        if not np.all(np.isfinite(values)):
            raise ContractError("parameter vector contains non-finite entries")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layer_map", layer_map)

    @classmethod
    def single_layer(cls, values, name: str = "output") -> "ParameterVector":
        arr = np.asarray(values, dtype=np.float64).reshape(-1)
        return cls(arr, ((name, 0, arr.size),))

    def with_values(self, values) -> "ParameterVector":
        return ParameterVector(values, self.layer_map)

    def zeros_like(self) -> "ParameterVector":
        return ParameterVector(np.zeros_like(self.values), self.layer_map)

    def __len__(self) -> int:
        return self.values.size

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ParameterVector):
            return NotImplemented
        return self.layer_map == other.layer_map and np.array_equal(self.values, other.values)

    def __repr__(self) -> str:
        layers = ", ".join(f"{n}[{s}:{s + l}]" for n, s, l in self.layer_map)
        return f"ParameterVector(d={len(self)}, layers=({layers}))"


def _as_array(a) -> np.ndarray:
    if isinstance(a, ParameterVector):
        return a.values
    return np.asarray(a, dtype=np.float64)


def l2_norm(a) -> float:
    return float(np.linalg.norm(_as_array(a)))


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between ``a`` and ``b``.

    Returns 0.0 when either vector has norm below ``EPS_NORM``: a zero update
    has no direction and must not earn trust.
    """
    x, y = _as_array(a), _as_array(b)
    if x.shape != y.shape:
        raise ContractError(f"length mismatch: {x.size} vs {y.size}")
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx < EPS_NORM or ny < EPS_NORM:
        return 0.0
    return float(np.clip(np.dot(x, y) / (nx * ny), -1.0, 1.0))


def weighted_sum(vectors: Sequence[ParameterVector], weights: Sequence[float]) -> ParameterVector:
    if len(vectors) == 0:
        raise ContractError("weighted_sum of an empty list")
    if len(vectors) != len(weights):
        raise ContractError(f"{len(vectors)} vectors but {len(weights)} weights")
    layer_map = vectors[0].layer_map
    for v in vectors[1:]:
        if v.layer_map != layer_map:
            raise ContractError("weighted_sum over vectors with different layer maps")
    w = np.asarray(weights, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ContractError("weights must be finite")
    # fixed left-to-right accumulation keeps results bitwise reproducible
    acc = np.zeros_like(vectors[0].values)
    for wi, v in zip(w, vectors):
        acc = acc + wi * v.values
    return ParameterVector(acc, layer_map)


def mean(vectors: Sequence[ParameterVector]) -> ParameterVector:
    n = len(vectors)
    if n == 0:
        raise ContractError("mean of an empty list")
    return weighted_sum(vectors, [1.0 / n] * n)


def last_layer_view(v: ParameterVector) -> np.ndarray:
    """Read-only view of the final layer segment (no copy)."""
    if not v.layer_map:
        raise ContractError("empty layer map")
    _, start, length = v.layer_map[-1]
    return v.values[start:start + length]


def layer_slice(v: ParameterVector, last_layer: bool = True) -> np.ndarray:
    return last_layer_view(v) if last_layer else v.values
