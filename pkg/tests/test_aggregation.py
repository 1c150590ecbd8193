import math
from itertools import combinations

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from costtrustfl.aggregation import (
    AggregationContext,
    aggregate,
    aggregate_crosscloud,
    aggregate_fedavg,
    aggregate_fltrust,
    aggregate_krum,
    aggregate_median,
    aggregate_trimmed_mean,
    aggregate_trustfl,
    normalize_update,
    trust_scores,
)
from costtrustfl.errors import ConfigurationError
from costtrustfl.linalg import ParameterVector, l2_norm

finite = st.floats(-1e3, 1e3, allow_nan=False)


def vec(*xs):
    return ParameterVector.single_layer(xs)


def pv(a):
    return ParameterVector.single_layer(a)


def vectors(n_min=1, n_max=8, dim=4):
    return st.lists(arrays(np.float64, dim, elements=finite), min_size=n_min, max_size=n_max)


def test_trust_score_examples():
    ref = vec(1, 0)
    np.testing.assert_allclose(trust_scores([vec(2, 0)], ref, [0.2]), [0.2])
    np.testing.assert_array_equal(trust_scores([vec(-1, 0)], ref, [0.5]), [0.0])
    np.testing.assert_array_equal(trust_scores([vec(0, 3)], ref, [0.5]), [0.0])


def test_zero_reference_is_configuration_error():
    with pytest.raises(ConfigurationError):
        trust_scores([vec(1, 0)], vec(0, 0), [1.0])


def test_normalize_examples():
    ref = vec(1, 0)
    np.testing.assert_allclose(normalize_update(vec(6, 8), ref).values, [0.6, 0.8])
    g = vec(0.6, 0.8)
    # the direction grid moves entries by at most 2**-27
    np.testing.assert_allclose(normalize_update(g, ref).values, g.values, rtol=0, atol=2.0**-26)
    h = vec(0.3, -2.0)
    assert normalize_update(h.with_values(10 * h.values), ref) == normalize_update(h, ref)
    assert normalize_update(vec(0, 0), ref) is None


@given(arrays(np.float64, st.integers(1, 50), elements=finite), arrays(np.float64, 7, elements=finite))
def test_normalized_norm_within_four_ulps(g, ref):
    assume(np.linalg.norm(g) > 1e-6 and np.linalg.norm(ref) > 1e-6)
    target = l2_norm(pv(ref))
    out = normalize_update(pv(g), pv(ref))
    assert abs(l2_norm(out) - target) <= 4 * np.spacing(target)


@given(arrays(np.float64, st.integers(1, 60), elements=finite), st.floats(1e-3, 1e3), st.integers(0, 1000))
def test_normalization_is_bitwise_scale_invariant(g, s, seed):
    assume(np.linalg.norm(g) > 1e-6)
    ref = pv(np.random.default_rng(seed).standard_normal(g.size))
    a = normalize_update(pv(g), ref)
    b = normalize_update(pv(s * g), ref)
    np.testing.assert_array_equal(a.values, b.values)


def test_trustfl_examples():
    ref = vec(1, 1)
    g = vec(2, 1)
    assert aggregate_trustfl([g], ref, [1.0])[0] == normalize_update(g, ref)
    out, _ = aggregate_trustfl([g, g], ref, [0.5, 0.5])
    np.testing.assert_allclose(out.values, normalize_update(g, ref).values, rtol=1e-15)
    out, ts = aggregate_trustfl([g, g.with_values(-g.values)], ref, [0.5, 0.5])
    assert ts[1] == 0.0
    assert out == normalize_update(g, ref)


def test_no_trust_falls_back_to_reference():
    ref = vec(1, 0)
    out, ts = aggregate_trustfl([vec(-1, 0), vec(0, 1)], ref, [0.5, 0.5])
    assert out == ref and not ts.any()


@given(vectors(1, 6), arrays(np.float64, 4, elements=finite), st.lists(st.floats(0.01, 1), min_size=6, max_size=6))
def test_trustfl_convex_combination(ups, ref, r):
    assume(np.linalg.norm(ref) > 1e-3)
    out, ts = aggregate_trustfl([pv(u) for u in ups], pv(ref), r[: len(ups)], last_layer=False)
    assert l2_norm(out) <= l2_norm(pv(ref)) * (1 + 1e-12)


def test_trustfl_identical_updates_hit_reference_norm():
    ref = vec(3, 4)
    out, _ = aggregate_trustfl([vec(1, 1)] * 4, ref, [0.1, 0.2, 0.3, 0.4])
    assert l2_norm(out) == pytest.approx(5.0, rel=1e-14)


def test_fltrust_examples():
    ref = vec(1, 0)
    ups = [vec(2, 1), vec(1, 2), vec(-3, 0)]
    assert aggregate_fltrust(ups, ref) == aggregate_trustfl(ups, ref, [1 / 3] * 3)[0]
    # equal cosine: plain mean of normalized updates
    a, b = vec(1, 1), vec(2, -2)
    expected = (normalize_update(a, ref).values + normalize_update(b, ref).values) / 2
    np.testing.assert_allclose(aggregate_fltrust([a, b], ref).values, expected, rtol=1e-15)


def test_scaled_attacker_changes_nothing():
    ref = vec(1, 0.5, -0.2)
    rng = np.random.default_rng(0)
    ups = [pv(rng.standard_normal(3) + ref.values) for _ in range(5)]
    r = [0.1, 0.3, 0.2, 0.25, 0.15]
    attacked = ups[:4] + [ups[4].with_values(10 * ups[4].values)]
    assert aggregate_trustfl(attacked, ref, r)[0] == aggregate_trustfl(ups, ref, r)[0]


def test_crosscloud_examples():
    u = vec(1, 2)
    out, beta = aggregate_crosscloud([u], [vec(1, 1)])
    np.testing.assert_allclose(beta, [1.0])
    np.testing.assert_allclose(out.values, u.values)
    _, beta = aggregate_crosscloud([u, u], [vec(1, 1), vec(1, 1)], [10, 10])
    np.testing.assert_allclose(beta, [0.5, 0.5])
    good, bad = vec(1, 1), vec(-1, -1)
    out, beta = aggregate_crosscloud([good, bad], [vec(1, 1), vec(1, 0.9)], [5, 5])
    np.testing.assert_array_equal(beta, [1.0, 0.0])
    assert out == good


def test_crosscloud_uniform_fallback(caplog):
    _, beta = aggregate_crosscloud([vec(-1, 0), vec(0, -1)], [vec(1, 0), vec(0, 1)])
    np.testing.assert_allclose(beta, [0.5, 0.5])
    assert "uniform" in caplog.text


def test_fedavg_examples():
    np.testing.assert_allclose(aggregate_fedavg([vec(1, 0), vec(0, 1)], [1, 1]).values, [0.5, 0.5])
    np.testing.assert_allclose(aggregate_fedavg([vec(4, 0), vec(0, 4)], [3, 1]).values, [3, 1])
    assert aggregate_fedavg([vec(7, -1)], [5]) == vec(7, -1)


@given(vectors(1, 8), st.lists(st.integers(1, 100), min_size=8, max_size=8), st.randoms())
def test_fedavg_matches_weighted_average_and_is_permutation_invariant(ups, counts, rnd):
    counts = counts[: len(ups)]
    out = aggregate_fedavg([pv(u) for u in ups], counts)
    direct = sum(c * u for c, u in zip(counts, ups)) / sum(counts)
    np.testing.assert_allclose(out.values, direct, rtol=1e-12, atol=1e-12)
    order = list(range(len(ups)))
    rnd.shuffle(order)
    shuffled = aggregate_fedavg([pv(ups[i]) for i in order], [counts[i] for i in order])
    np.testing.assert_allclose(shuffled.values, out.values, rtol=1e-12, atol=1e-12)


def brute_force_krum(points, f):
    """Score every candidate by explicit pairwise distances; first minimum wins."""
    n = len(points)
    best, best_score = None, math.inf
    for i in range(n):
        dists = []
        for j in range(n):
            if j != i:
                dists.append(sum((a - b) ** 2 for a, b in zip(points[i], points[j])))
        score = sum(sorted(dists)[: n - f - 2])
        if score < best_score:
            best, best_score = i, score
    return best


def test_krum_examples():
    cluster = [vec(1, 1), vec(1.1, 0.9), vec(0.9, 1.05), vec(1.02, 1.0)]
    out = aggregate_krum(cluster + [vec(100, 100)], 1)
    assert any(out == c for c in cluster)
    same = [vec(2, 2)] * 5
    assert aggregate_krum(same, 1) is same[0]


def test_krum_rejects_small_n():
    with pytest.raises(ConfigurationError):
        aggregate_krum([vec(1, 1)] * 4, 1)


def test_krum_matches_brute_force_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(3, 11))
        f = int(rng.integers(0, (n - 3) // 2 + 1))
        pts = rng.integers(-5, 6, size=(n, 3)).astype(float) * rng.choice([1.0, 0.5])
        ups = [pv(p) for p in pts]
        out = aggregate_krum(ups, f)
        assert out is ups[brute_force_krum(pts.tolist(), f)]


@given(vectors(3, 9), st.integers(0, 3))
def test_krum_selects_an_input(ups, f):
    f = min(f, (len(ups) - 3) // 2)
    vs = [pv(u) for u in ups]
    assert any(aggregate_krum(vs, f) is v for v in vs)


def sort_trimmed_mean(columns, b):
    out = []
    for col in columns:
        s = sorted(col)
        kept = s[b: len(s) - b]
        out.append(math.fsum(kept) / len(kept))
    return out


def sort_median(columns):
    out = []
    for col in columns:
        s = sorted(col)
        n = len(s)
        out.append(s[n // 2] if n % 2 else (s[n // 2 - 1] + s[n // 2]) / 2)
    return out


def test_trimmed_mean_and_median_examples():
    ups = [vec(x) for x in (1, 2, 3, 4, 100)]
    assert aggregate_trimmed_mean(ups, 0.2).values[0] == 3.0
    assert aggregate_median([vec(1), vec(2), vec(100)]).values[0] == 2.0
    assert aggregate_median([vec(1), vec(3)]).values[0] == 2.0
    np.testing.assert_allclose(aggregate_trimmed_mean(ups[:3], 0.0).values, [2.0])
    assert aggregate_trimmed_mean([vec(4, 5)] * 4, 0.25) == vec(4, 5)


@given(vectors(1, 10, 5), st.floats(0, 0.49))
def test_trimmed_mean_matches_sort_oracle(ups, frac):
    b = int(np.floor(frac * len(ups)))
    out = aggregate_trimmed_mean([pv(u) for u in ups], frac)
    np.testing.assert_allclose(out.values, sort_trimmed_mean(np.array(ups).T.tolist(), b), rtol=1e-12, atol=1e-12)


@given(vectors(1, 10, 5))
def test_median_matches_sort_oracle_and_is_bounded(ups):
    out = aggregate_median([pv(u) for u in ups]).values
    np.testing.assert_allclose(out, sort_median(np.array(ups).T.tolist()), rtol=1e-12, atol=1e-12)
    stacked = np.array(ups)
    assert np.all(out >= stacked.min(axis=0)) and np.all(out <= stacked.max(axis=0))


@given(vectors(5, 10, 3), st.integers(0, 9), st.integers(0, 2), st.sampled_from([1e12, -1e12]))
def test_trimmed_mean_ignores_one_outlier(ups, who, coord, big):
    who %= len(ups)
    frac = 0.2
    vs = [pv(u) for u in ups]
    # the outlier replaces a value already at the extreme the trim removes
    col = np.array(ups)[:, coord]
    who = int(np.argmax(col)) if big > 0 else int(np.argmin(col))
    poisoned = np.array(ups)
    poisoned[who, coord] = big
    a = aggregate_trimmed_mean(vs, frac).values
    b = aggregate_trimmed_mean([pv(u) for u in poisoned], frac).values
    assert a[coord] == pytest.approx(b[coord], rel=1e-12, abs=1e-9)


def test_degenerate_hierarchy_matches_fedavg():
    ref = vec(0, 0, 5)
    rng = np.random.default_rng(1)
    # same norm as the reference and the same cosine to it
    ups = []
    for _ in range(4):
        theta = rng.uniform(0, 2 * np.pi)
        ups.append(vec(3 * np.cos(theta), 3 * np.sin(theta), 4))
    n = len(ups)
    ctx = AggregationContext(sample_counts=[1] * n, ref_update=ref, r_hat=[1 / n] * n, last_layer=False)
    edge = aggregate("cost_trustfl", ups, ctx).update
    out, _ = aggregate_crosscloud([edge], [ref], [n])
    # trust normalization snaps directions to a 2**-26 grid, scaled here by the norm 5
    np.testing.assert_allclose(out.values, aggregate_fedavg(ups, [1] * n).values, rtol=0, atol=5 * 2.0**-26)


def test_registry_rejects_unknown():
    with pytest.raises(ConfigurationError):
        aggregate("bogus", [vec(1)], AggregationContext([1]))


@pytest.mark.parametrize("name", ["fedavg", "krum", "trimmed_mean", "median", "fltrust", "cost_trustfl"])
def test_registry_runs_every_rule(name):
    ups = [vec(1, 1), vec(1.1, 0.9), vec(0.9, 1.1), vec(1, 1.2), vec(-5, -5)]
    ctx = AggregationContext([1] * 5, ref_update=vec(1, 1), r_hat=[0.2] * 5, krum_f=1)
    assert len(aggregate(name, ups, ctx).update) == 2
