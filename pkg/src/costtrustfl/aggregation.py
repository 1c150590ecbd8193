"""Aggregation rules: trust-scored (FLTrust family), cross-cloud, and classic baselines."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError
from .linalg import EPS_NORM, ParameterVector, cosine_similarity, l2_norm, layer_slice, mean, weighted_sum

log = logging.getLogger(__name__)

STRATEGIES = ("fedavg", "krum", "trimmed_mean", "median", "fltrust", "cost_trustfl")


def _check_updates(updates: Sequence[ParameterVector]) -> None:
    if not updates:
        raise ContractError("no updates to aggregate")
    layer_map = updates[0].layer_map
    if any(u.layer_map != layer_map for u in updates[1:]):
        raise ContractError("updates have different layer maps")


# Unit directions are snapped to a grid of this many fractional bits. A
# scaled update such as fl(10 * g) carries fresh rounding noise near 1e-16;
# snapping removes it, so trust and normalization see the same direction
# bit for bit whatever the attacker's scale. The grid costs ~1e-8 precision.
DIRECTION_BITS = 26


def unit_direction(g: ParameterVector) -> Optional[np.ndarray]:
    """Grid-snapped ``g / ||g||``; ``None`` for a zero update."""
    norm = l2_norm(g)
    if norm <= EPS_NORM:
        return None
    grid = float(2 ** DIRECTION_BITS)
    u = np.round((g.values / norm) * grid) / grid
    return u if np.any(u) else None


def _fit_norm(u: np.ndarray, target: float) -> np.ndarray:
    """Scale ``u`` to norm ``target``, correcting the last few ulps of rounding."""
    first = u * (target / float(np.linalg.norm(u)))
    candidates = [first]
    values = first
    for _ in range(2):
        values = values * (target / float(np.linalg.norm(values)))
        candidates.append(values)
    err = [abs(float(np.linalg.norm(c)) - target) for c in candidates]
    best = candidates[int(np.argmin(err))]
    if min(err) > np.spacing(target):
        for k in range(1, 9):
            for step in (k, -k):
                nudged = best * (1.0 + step * np.finfo(np.float64).epsneg)
                candidates.append(nudged)
                err.append(abs(float(np.linalg.norm(nudged)) - target))
        best = candidates[int(np.argmin(err))]
    return best


def trust_scores(
    updates: Sequence[ParameterVector],
    ref_update: ParameterVector,
    r_hat: Sequence[float],
    last_layer: bool = True,
) -> np.ndarray:
    """TS_i = max(0, cos(g_i, g_ref)) * r_hat_i, on the snapped direction of g_i."""
    _check_updates(updates)
    if l2_norm(ref_update) <= EPS_NORM:
        raise ConfigurationError("reference update is zero; cannot bootstrap trust")
    if len(r_hat) != len(updates):
        raise ContractError("one reputation value per update is required")
    ref = layer_slice(ref_update, last_layer)
    ts = np.zeros(len(updates))
    for i, g in enumerate(updates):
        u = unit_direction(g)
        if u is not None:
            ts[i] = max(0.0, cosine_similarity(layer_slice(g.with_values(u), last_layer), ref)) * float(r_hat[i])
    return ts


def normalize_update(g: ParameterVector, g_ref: ParameterVector) -> Optional[ParameterVector]:
    """Rescale ``g`` to the reference norm; ``None`` for a zero update.

    The result depends on ``g`` only through :func:`unit_direction`, so any
    positive rescaling of ``g`` gives the same output.
    """
    u = unit_direction(g)
    if u is None:
        return None
    return g.with_values(_fit_norm(u, l2_norm(g_ref)))


def aggregate_trustfl(
    updates: Sequence[ParameterVector],
    ref_update: ParameterVector,
    r_hat: Sequence[float],
    *,
    normalize: bool = True,
    last_layer: bool = True,
) -> tuple[ParameterVector, np.ndarray]:
    """Trust-weighted mean of (norm-matched) updates.

    Returns the aggregate and the trust scores used. If no update earns
    trust, the reference update itself is returned.
    """
    ts = trust_scores(updates, ref_update, r_hat, last_layer)
    vectors, weights = [], []
    for i, g in enumerate(updates):
        g_tilde = normalize_update(g, ref_update) if normalize else g
        if g_tilde is None:
            ts[i] = 0.0
            continue
        if ts[i] > 0:
            vectors.append(g_tilde)
            weights.append(ts[i])
    total = float(np.sum(weights)) if weights else 0.0
    if total <= 0:
        return ref_update, ts
    return weighted_sum(vectors, [w / total for w in weights]), ts


def aggregate_fltrust(
    updates: Sequence[ParameterVector],
    ref_update: ParameterVector,
    *,
    normalize: bool = True,
    last_layer: bool = True,
) -> ParameterVector:
    n = len(updates)
    return aggregate_trustfl(
        updates, ref_update, [1.0 / n] * n, normalize=normalize, last_layer=last_layer
    )[0]


def cloud_trust(
    cloud_updates: Sequence[ParameterVector],
    cloud_refs: Sequence[ParameterVector],
    cloud_sizes: Sequence[float],
) -> np.ndarray:
    """beta_k proportional to max(0, cos(g_k, mean reference)) * n_k, summing to one."""
    _check_updates(cloud_updates)
    if len(cloud_refs) != len(cloud_updates) or len(cloud_sizes) != len(cloud_updates):
        raise ContractError("one reference and one size per cloud are required")
    anchor = mean(cloud_refs).values
    beta = np.array(
        [max(0.0, cosine_similarity(g.values, anchor)) * n for g, n in zip(cloud_updates, cloud_sizes)]
    )
    total = beta.sum()
    if total <= 0:
        log.warning("no cloud update agrees with the reference; using uniform cloud weights")
        return np.full(len(cloud_updates), 1.0 / len(cloud_updates))
    return beta / total


def aggregate_crosscloud(
    cloud_updates: Sequence[ParameterVector],
    cloud_refs: Sequence[ParameterVector],
    cloud_sizes: Optional[Sequence[float]] = None,
) -> tuple[ParameterVector, np.ndarray]:
    """Combine edge aggregates with cloud trust; returns (sum beta_k g_k, beta)."""
    sizes = [1.0] * len(cloud_updates) if cloud_sizes is None else cloud_sizes
    beta = cloud_trust(cloud_updates, cloud_refs, sizes)
    return weighted_sum(cloud_updates, beta), beta


def aggregate_fedavg(updates: Sequence[ParameterVector], sample_counts: Sequence[float]) -> ParameterVector:
    _check_updates(updates)
    counts = np.asarray(sample_counts, dtype=np.float64)
    if counts.size != len(updates):
        raise ContractError("one sample count per update is required")
    if np.any(counts < 0) or counts.sum() <= 0:
        raise ContractError("sample counts must be non-negative with a positive total")
    return weighted_sum(updates, counts / counts.sum())


def krum_scores(updates: Sequence[ParameterVector], num_malicious_bound: int) -> np.ndarray:
    n = len(updates)
    k = n - num_malicious_bound - 2
    stacked = np.stack([u.values for u in updates])
    sq = ((stacked[:, None, :] - stacked[None, :, :]) ** 2).sum(axis=2)
    scores = np.empty(n)
    for i in range(n):
        others = np.sort(np.delete(sq[i], i))
        scores[i] = others[:k].sum()
    return scores


def aggregate_krum(updates: Sequence[ParameterVector], num_malicious_bound: int) -> ParameterVector:
    """The update with the smallest summed squared distance to its n - f - 2 nearest peers."""
    _check_updates(updates)
    n, f = len(updates), num_malicious_bound
    if f < 0 or n < 2 * f + 3:
        raise ConfigurationError(f"Krum needs n >= 2f + 3 (n={n}, f={f})", field="krum_f")
    scores = krum_scores(updates, f)
    # argmin returns the first minimum, i.e. the lowest client index on ties
    return updates[int(np.argmin(scores))]


def aggregate_trimmed_mean(updates: Sequence[ParameterVector], trim_fraction: float) -> ParameterVector:
    _check_updates(updates)
    n = len(updates)
    if not 0.0 <= trim_fraction < 0.5:
        raise ConfigurationError("trim_fraction must lie in [0, 0.5)", field="trim_fraction")
    b = int(np.floor(trim_fraction * n))
    if n - 2 * b < 1:
        raise ConfigurationError("trimming leaves no values", field="trim_fraction")
    stacked = np.sort(np.stack([u.values for u in updates]), axis=0)
    return updates[0].with_values(stacked[b:n - b].mean(axis=0))


def aggregate_median(updates: Sequence[ParameterVector]) -> ParameterVector:
    _check_updates(updates)
    return updates[0].with_values(np.median(np.stack([u.values for u in updates]), axis=0))


@dataclass
class AggregationContext:
    """Everything a rule may need besides the updates themselves."""

    sample_counts: Sequence[float]
    ref_update: Optional[ParameterVector] = None
    r_hat: Optional[Sequence[float]] = None
    trim_fraction: float = 0.2
    krum_f: int = 0
    normalize: bool = True
    last_layer: bool = True


@dataclass
class AggregationResult:
    update: ParameterVector
    trust: Optional[np.ndarray] = None


def _needs_ref(name: str, ctx: AggregationContext) -> ParameterVector:
    if ctx.ref_update is None:
        raise ConfigurationError(f"strategy {name!r} needs a reference update", field="strategy")
    return ctx.ref_update


def _run_krum(updates, ctx: AggregationContext) -> AggregationResult:
    # cap the declared bound so small clouds can still run Krum
    f = max(0, min(ctx.krum_f, (len(updates) - 3) // 2))
    if len(updates) < 3:
        return AggregationResult(mean(updates))
    return AggregationResult(aggregate_krum(updates, f))


def _run_trustfl(updates, ctx: AggregationContext) -> AggregationResult:
    r_hat = ctx.r_hat if ctx.r_hat is not None else [1.0 / len(updates)] * len(updates)
    update, ts = aggregate_trustfl(
        updates, _needs_ref("cost_trustfl", ctx), r_hat, normalize=ctx.normalize, last_layer=ctx.last_layer
    )
    return AggregationResult(update, ts)


def _run_fltrust(updates, ctx: AggregationContext) -> AggregationResult:
    n = len(updates)
    update, ts = aggregate_trustfl(
        updates, _needs_ref("fltrust", ctx), [1.0 / n] * n, normalize=ctx.normalize, last_layer=ctx.last_layer
    )
    return AggregationResult(update, ts)


AGGREGATORS: dict[str, Callable[[Sequence[ParameterVector], AggregationContext], AggregationResult]] = {
    "fedavg": lambda u, ctx: AggregationResult(aggregate_fedavg(u, ctx.sample_counts)),
    "krum": _run_krum,
    "trimmed_mean": lambda u, ctx: AggregationResult(aggregate_trimmed_mean(u, ctx.trim_fraction)),
    "median": lambda u, ctx: AggregationResult(aggregate_median(u)),
    "fltrust": _run_fltrust,
    "cost_trustfl": _run_trustfl,
}


def aggregate(name: str, updates: Sequence[ParameterVector], ctx: AggregationContext) -> AggregationResult:
    try:
        rule = AGGREGATORS[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown strategy {name!r}; choose from {', '.join(STRATEGIES)}", field="strategy"
        ) from None
    return rule(updates, ctx)
