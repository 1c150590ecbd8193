import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from costtrustfl.data import (
    Dataset,
    carve_reference,
    dirichlet_partition,
    generate_synthetic,
    load_columnar,
    save_columnar,
    train_test_split,
)
from costtrustfl.economy import CloudTopology
from costtrustfl.errors import ConfigurationError
from costtrustfl.model import ModelSpec, TrainConfig, forward_loss, init_params, local_train


def test_generate_shape_and_balance():
    d = generate_synthetic(10, 100, 32, seed=1)
    assert len(d) == 1000 and d.feature_dim == 32
    np.testing.assert_array_equal(d.label_histogram(), np.full(10, 100))


def test_generate_deterministic():
    a = generate_synthetic(10, 100, 32, seed=1)
    b = generate_synthetic(10, 100, 32, seed=1)
    assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)


def test_two_blobs_linearly_separable():
    d = generate_synthetic(2, 50, 8, seed=7)
    spec = ModelSpec(8, 0, 2)
    w0 = init_params(spec, 0)
    cfg = TrainConfig(local_epochs=50, batch_size=16, learning_rate=0.1)
    w = w0.with_values(w0.values - local_train(spec, w0, d, cfg, seed=0).values)
    assert forward_loss(spec, w, d)[1] > 0.9


def test_train_test_split_stratified_and_disjoint():
    d = generate_synthetic(10, 300, 32, seed=0)
    train, test = train_test_split(d, 0.2, seed=0)
    np.testing.assert_array_equal(test.label_histogram(), np.full(10, 60))
    assert not set(train.index) & set(test.index)
    assert len(train) + len(test) == len(d)


def test_single_client_gets_everything():
    d = generate_synthetic(5, 20, 4, seed=0)
    (shard,) = dirichlet_partition(d, 1, 0.5, seed=3)
    np.testing.assert_array_equal(np.sort(shard.index), np.arange(len(d)))


@settings(max_examples=60)
@given(st.sampled_from([0.1, 0.5, 1000.0]), st.integers(0, 2**31 - 1), st.integers(1, 12))
def test_partition_conservation_and_disjointness(alpha, seed, n):
    d = generate_synthetic(5, 40, 3, seed=1)
    shards = dirichlet_partition(d, n, alpha, seed)
    assert len(shards) == n
    ids = np.concatenate([s.index for s in shards])
    assert ids.size == len(d)
    np.testing.assert_array_equal(np.sort(ids), np.arange(len(d)))


def test_large_alpha_is_nearly_uniform():
    d = generate_synthetic(10, 1000, 4, seed=0)
    hist = np.zeros((10, 10))
    seeds = range(10)
    for seed in seeds:
        for i, shard in enumerate(dirichlet_partition(d, 10, 1000.0, seed)):
            hist[i] += shard.label_histogram()
    hist /= len(seeds)
    assert np.all(np.abs(hist - 100) <= 20)


def _mean_entropy(alpha, seeds):
    d = generate_synthetic(10, 100, 4, seed=0)
    values = []
    for seed in seeds:
        for shard in dirichlet_partition(d, 10, alpha, seed):
            if len(shard):
                p = shard.label_histogram() / len(shard)
                p = p[p > 0]
                values.append(-(p * np.log(p)).sum())
    return np.mean(values)


def test_lower_alpha_lower_entropy():
    assert _mean_entropy(0.1, range(10)) < _mean_entropy(1000.0, range(10))


def _setup(reference_size, clients_per_cloud=5, seed=0):
    d = generate_synthetic(10, 300, 8, seed=seed)
    topo = CloudTopology.uniform(3, clients_per_cloud)
    shards = dirichlet_partition(d, topo.num_clients, 1.0, seed)
    return shards, topo, carve_reference(shards, topo, reference_size, seed)


def test_reference_size_zero_leaves_clients_alone():
    shards, _, split = _setup(0)
    assert all(len(r) == 0 for r in split.reference_shards)
    for a, b in zip(shards, split.client_shards):
        np.testing.assert_array_equal(a.index, b.index)


def test_reference_exact_size_and_stratified():
    shards, topo, split = _setup(100)
    for k, ref in enumerate(split.reference_shards):
        assert len(ref) == 100
        # every class has far more than 10 samples per cloud here
        np.testing.assert_array_equal(ref.label_histogram(), np.full(10, 10))
        owned = np.concatenate([split.client_shards[i].index for i in topo.clients_in(k)])
        before = np.concatenate([shards[i].index for i in topo.clients_in(k)])
        # reference rows leave the clients, nothing else does
        assert not set(ref.index) & set(owned)
        np.testing.assert_array_equal(np.sort(np.concatenate([owned, ref.index])), np.sort(before))


def test_reference_too_large_is_configuration_error():
    d = generate_synthetic(2, 10, 2, seed=0)
    topo = CloudTopology.uniform(1, 2)
    with pytest.raises(ConfigurationError):
        carve_reference(dirichlet_partition(d, 2, 1.0, 0), topo, 50, 0)


def test_columnar_round_trip(tmp_path):
    d = generate_synthetic(3, 4, 5, seed=2)
    path = tmp_path / "d.csv"
    save_columnar(d, path)
    back = load_columnar(path)
    np.testing.assert_array_equal(back.features, d.features)
    np.testing.assert_array_equal(back.labels, d.labels)
    assert back.num_classes == 3


def test_columnar_errors_name_the_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("2,3\n0.1,0.2,1\n0.5,x,0\n")
    with pytest.raises(ConfigurationError, match=":3:"):
        load_columnar(path)


def test_dataset_rejects_bad_labels():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), [0, 5], 3)
