import numpy as np
import pytest

from offsetfed import datagen
from offsetfed.config import ConfigurationError
from offsetfed.datagen import Partition
from offsetfed.tensor import ContractError


def from_counts(matrix):
    """Partition over consecutive indices with the given client x class counts."""
    matrix = np.asarray(matrix)
    labels, assignments, start = [], [], 0
    for row in matrix:
        indices = []
        for label, count in enumerate(row):
            labels.extend([label] * count)
            indices.extend(range(start, start + count))
            start += count
        assignments.append(indices)
    return Partition.from_assignments(assignments, labels, matrix.shape[1])


DH_HALF = [[5, 5, 10, 0], [5, 5, 0, 10]]


def test_make_blobs_smallest_case():
    data = datagen.make_blobs(2, 1, 2, 0.5, seed=0)
    assert len(data) == 2
    assert sorted(data.labels.tolist()) == [0, 1]
    assert data.input_shape == (2,)


def test_make_blobs_is_deterministic():
    a = datagen.make_blobs(4, 10, 3, 0.5, seed=42)
    b = datagen.make_blobs(4, 10, 3, 0.5, seed=42)
    np.testing.assert_array_equal(a.inputs, b.inputs)
    np.testing.assert_array_equal(a.labels, b.labels)
    c = datagen.make_blobs(4, 10, 3, 0.5, seed=43)
    assert not np.array_equal(a.inputs, c.inputs)


def test_make_blobs_are_separable():
    data = datagen.make_blobs(8, 50, 16, 0.5, seed=0)
    centroids = np.stack(
        [data.inputs[data.class_indices(j)].mean(axis=0) for j in range(8)]
    )
    distances = np.linalg.norm(data.inputs[:, None, :] - centroids[None, :, :], axis=2)
    accuracy = np.mean(np.argmin(distances, axis=1) == data.labels)
    assert accuracy >= 0.95


def test_make_blobs_needs_enough_dimensions():
    with pytest.raises(ContractError):
        datagen.make_blobs(8, 10, 2, 0.5, seed=0)
    with pytest.raises(ContractError):
        datagen.make_blobs(1, 10, 2, 0.5, seed=0)


def test_single_class_clients():
    data = datagen.make_blobs(4, 10, 2, 0.5, seed=1)
    p = datagen.partition(data, 4, 1, seed=3)
    held = p.class_count_matrix > 0
    assert held.sum(axis=0).tolist() == [1, 1, 1, 1]
    assert held.sum(axis=1).tolist() == [1, 1, 1, 1]
    assert datagen.distributional_heterogeneity(p) == 1.0


def test_partition_conserves_samples():
    data = datagen.make_blobs(2, 10, 1, 0.5, seed=0)
    p = datagen.partition(data, 2, 1, seed=0)
    assert p.class_count_matrix.sum() == 20
    assert sorted(p.class_count_matrix.max(axis=1).tolist()) == [10, 10]
    merged = np.sort(np.concatenate(p.assignments))
    np.testing.assert_array_equal(merged, np.arange(20))


def test_partition_shares_stay_in_bounds():
    clients, per_class = 4, 100
    data = datagen.make_blobs(3, per_class, 2, 0.5, seed=0)
    low = datagen.SHARE_LOW / (datagen.SHARE_HIGH * clients) - 1.0 / per_class
    high = datagen.SHARE_HIGH / (datagen.SHARE_LOW * clients) + clients / per_class
    for seed in range(200):
        p = datagen.partition(data, clients, 3, seed)
        fractions = p.fraction_matrix()
        assert fractions.min() >= low
        assert fractions.max() <= high
        np.testing.assert_allclose(fractions.sum(axis=0), 1.0)
        assert datagen.distributional_heterogeneity(p) == 0.0


def test_partition_is_deterministic():
    data = datagen.make_blobs(4, 20, 2, 0.5, seed=0)
    a = datagen.partition(data, 6, 2, seed=9)
    b = datagen.partition(data, 6, 2, seed=9)
    for x, y in zip(a.assignments, b.assignments):
        np.testing.assert_array_equal(x, y)


def test_partition_configuration_errors():
    data = datagen.make_blobs(4, 10, 2, 0.5, seed=0)
    with pytest.raises(ConfigurationError):
        datagen.partition(data, 3, 1, seed=0)
    with pytest.raises(ConfigurationError):
        datagen.partition(data, 3, 5, seed=0)
    with pytest.raises(ConfigurationError):
        datagen.partition(data, 3, 0, seed=0)


def test_partition_rejects_overlapping_clients():
    with pytest.raises(ContractError):
        Partition.from_assignments([[0, 1], [1, 2]], [0, 1, 0], 2)


def test_dh_extremes_and_mixed_fixture():
    shared = from_counts([[3, 3], [3, 3], [3, 3]])
    assert datagen.distributional_heterogeneity(shared) == 0.0
    assert datagen.distributional_heterogeneity(from_counts([[3, 0], [0, 3]])) == 1.0
    assert datagen.distributional_heterogeneity(from_counts(DH_HALF)) == 0.5


def test_dh_rejects_unheld_class():
    with pytest.raises(ContractError):
        datagen.distributional_heterogeneity(from_counts([[3, 0, 1], [2, 0, 1]]))


def test_dh_is_invariant_under_relabeling():
    rng = np.random.default_rng(0)
    for _ in range(50):
        matrix = rng.integers(0, 3, size=(5, 4)) * rng.integers(0, 2, size=(5, 4))
        matrix[0] += 1
        dh = datagen.distributional_heterogeneity(from_counts(matrix))
        assert 0.0 <= dh <= 1.0
        shuffled = matrix[rng.permutation(5)][:, rng.permutation(4)]
        again = datagen.distributional_heterogeneity(from_counts(shuffled))
        assert again == pytest.approx(dh, abs=1e-15)


def test_dh_of_random_partitions_is_a_fraction():
    data = datagen.make_blobs(6, 20, 3, 0.5, seed=0)
    for seed in range(20):
        p = datagen.partition(data, 5, 2 + seed % 5, seed)
        assert 0.0 <= datagen.distributional_heterogeneity(p) <= 1.0


def test_class_embedding():
    p = from_counts(DH_HALF)
    first, second = datagen.class_embedding(p, 0), datagen.class_embedding(p, 1)
    np.testing.assert_array_equal(first.values, [0.5, 0.5, 1.0, 0.0])
    np.testing.assert_array_equal(second.values, [0.5, 0.5, 0.0, 1.0])
    alone = from_counts([[4, 2, 7]])
    solo = datagen.class_embedding(alone, 0)
    np.testing.assert_array_equal(solo.values, [1.0, 1.0, 1.0])
    with pytest.raises(ContractError):
        datagen.class_embedding(p, 2)


def test_stratified_split():
    data = datagen.make_blobs(3, 10, 2, 0.5, seed=0)
    train, test = datagen.train_test_split(data, 0.5, seed=1)
    assert np.bincount(train.labels).tolist() == [5, 5, 5]
    assert np.bincount(test.labels).tolist() == [5, 5, 5]
    a, _ = datagen.train_test_split_indices(data, 0.5, seed=1)
    b, _ = datagen.train_test_split_indices(data, 0.5, seed=2)
    assert not np.array_equal(a, b)
    assert np.bincount(data.labels[b]).tolist() == [5, 5, 5]


def test_split_errors():
    with pytest.raises(ConfigurationError):
        datagen.train_test_split(datagen.make_blobs(2, 1, 1, 0.5, seed=0), 0.5, seed=0)
    with pytest.raises(ConfigurationError):
        datagen.train_test_split(datagen.make_blobs(2, 10, 1, 0.5, seed=0), 1.0, seed=0)


def test_partition_file_round_trip(tmp_path):
    data = datagen.make_blobs(4, 10, 2, 0.5, seed=0)
    p = datagen.partition(data, 3, 2, seed=5)
    path = str(tmp_path / "partition.json")
    datagen.save_partition(path, p)
    loaded = datagen.load_partition(path)
    np.testing.assert_array_equal(loaded.class_count_matrix, p.class_count_matrix)
    for a, b in zip(loaded.assignments, p.assignments):
        np.testing.assert_array_equal(a, b)
    with pytest.raises(ConfigurationError):
        datagen.load_partition(str(tmp_path / "missing.json"))
