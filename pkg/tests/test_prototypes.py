import numpy as np
import numpy.testing as npt
import pytest

from protoadapt.errors import DimensionError
from protoadapt.prototypes import (PrototypeBank, batch_centroids, distances,
                                   ema_update_prototypes, init_prototypes,
                                   write_centroids_csv)


def brute_force_centroids(features, labels, class_count):
    """Literal indicator-sum definition, kept independent of the library path."""
    out = np.zeros((class_count, features.shape[1]))
    counts = np.zeros(class_count)
    for f, y in zip(features, labels):
        if 0 <= y < class_count:
            out[y] += f
            counts[y] += 1
    for k in range(class_count):
        if counts[k]:
            out[k] /= counts[k]
    return out, counts


def test_init_identity_features_one_per_class():
    bank = init_prototypes(np.eye(3), np.array([0, 1, 2]), 3)
    npt.assert_array_equal(bank.centroids, np.eye(3))
    assert bank.seen.all()


def test_init_mean_of_class_members():
    feats = np.array([[0.0, 0.0], [2.0, 2.0], [5.0, 1.0]])
    bank = init_prototypes(feats, np.array([0, 0, 1]), 2)
    npt.assert_allclose(bank.centroids[0], [1.0, 1.0])


def test_init_absent_class_zero_and_unseen():
    feats = np.array([[1.0, 0.0], [0.0, 1.0]])
    bank = init_prototypes(feats, np.array([0, 1]), 3)
    npt.assert_array_equal(bank.centroids[2], 0.0)
    assert not bank.seen[2]
    assert bank.seen[0] and bank.seen[1]


def test_init_matches_brute_force_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = rng.integers(1, 30)
        k = rng.integers(1, 6)
        d = rng.integers(1, 5)
        feats = rng.normal(size=(n, d))
        labels = rng.integers(0, k, size=n)
        bank = init_prototypes(feats, labels, int(k))
        expected, counts = brute_force_centroids(feats, labels, int(k))
        assert np.abs(bank.centroids - expected).max() < 1e-10
        npt.assert_array_equal(bank.seen, counts > 0)


def test_batch_centroids_full_dataset_equals_init():
    rng = np.random.default_rng(1)
    feats = rng.normal(size=(40, 3))
    labels = rng.integers(0, 4, size=40)
    bank = init_prototypes(feats, labels, 4)
    cents, counts = batch_centroids(feats, labels, 4)
    npt.assert_allclose(cents[counts > 0], bank.centroids[counts > 0])


def test_batch_centroids_arithmetic():
    cents, counts = batch_centroids(np.array([[1.0, 3.0], [3.0, 1.0]]),
                                    np.array([1, 1]), 3)
    npt.assert_allclose(cents[1], [2.0, 2.0])
    npt.assert_array_equal(counts, [0, 2, 0])


def test_batch_centroids_single_class_marks_others_absent():
    cents, counts = batch_centroids(np.ones((5, 2)), np.zeros(5, dtype=int), 3)
    assert counts[0] == 5
    assert counts[1] == counts[2] == 0
    npt.assert_array_equal(cents[1:], 0.0)


def test_ema_update_default_momentum_value():
    bank = PrototypeBank(1, 2, momentum=0.9999)
    bank.centroids[...] = 1.0
    bank.seen[...] = True
    ema_update_prototypes(bank, np.full((1, 2), 2.0), np.array([4]))
    npt.assert_allclose(bank.centroids, 1.0001, rtol=1e-12)


def test_ema_update_fixed_point():
    bank = PrototypeBank(2, 2, momentum=0.37)
    bank.centroids[...] = 1.5
    bank.seen[...] = True
    ema_update_prototypes(bank, np.full((2, 2), 1.5), np.array([1, 1]))
    npt.assert_array_equal(bank.centroids, 1.5)


def test_ema_update_absent_class_unchanged():
    bank = PrototypeBank(2, 2, momentum=0.5)
    bank.centroids[0] = [1.0, 1.0]
    bank.seen[...] = True
    ema_update_prototypes(bank, np.array([[9.0, 9.0], [5.0, 5.0]]),
                          np.array([0, 2]))
    npt.assert_array_equal(bank.centroids[0], [1.0, 1.0])
    npt.assert_allclose(bank.centroids[1], 2.5)


def test_ema_update_first_sighting_snaps_to_batch_mean():
    bank = PrototypeBank(2, 2, momentum=0.9999)
    bank.centroids[0] = [1.0, 1.0]
    bank.seen[0] = True
    ema_update_prototypes(bank, np.array([[0.0, 0.0], [3.0, 4.0]]),
                          np.array([0, 2]))
    npt.assert_array_equal(bank.centroids[1], [3.0, 4.0])
    assert bank.seen[1]


def test_ema_update_shape_mismatch():
    bank = PrototypeBank(2, 2, momentum=0.5)
    with pytest.raises(DimensionError):
        ema_update_prototypes(bank, np.zeros((3, 2)), np.array([1, 1, 1]))


def test_distances_examples():
    bank = PrototypeBank(2, 2, momentum=0.5)
    bank.centroids[0] = [0.0, 0.0]
    bank.centroids[1] = [1.0, 1.0]
    bank.seen[...] = True
    d = distances(bank, np.array([[3.0, 4.0], [1.0, 1.0]]))
    assert d[0, 0] == pytest.approx(5.0)
    assert d[1, 1] == 0.0


def test_distances_equal_centroids_equal_rows():
    bank = PrototypeBank(3, 2, momentum=0.5)
    bank.centroids[...] = 0.7
    bank.seen[...] = True
    d = distances(bank, np.random.default_rng(0).normal(size=(6, 2)))
    npt.assert_allclose(d, np.tile(d[:, :1], (1, 3)))


def test_distances_unseen_class_is_infinite():
    bank = PrototypeBank(2, 2, momentum=0.5)
    bank.seen[0] = True
    d = distances(bank, np.zeros((3, 2)))
    assert np.isinf(d[:, 1]).all()
    assert np.isfinite(d[:, 0]).all()


def test_repeated_full_batch_updates_converge():
    # contraction by the momentum factor each step, from a unit-length offset
    rng = np.random.default_rng(3)
    feats = rng.normal(size=(60, 2))
    labels = rng.integers(0, 3, size=60)
    truth, _ = brute_force_centroids(feats, labels, 3)
    lam = 0.9
    bank = init_prototypes(feats, labels, 3, momentum=lam)
    offset = rng.normal(size=2)
    bank.centroids += offset / np.linalg.norm(offset)  # gap of exactly 1
    steps = int(np.ceil(np.log(1e-2) / np.log(lam)))
    for _ in range(steps):
        cents, counts = batch_centroids(feats, labels, 3)
        ema_update_prototypes(bank, cents, counts)
    gap = np.linalg.norm(bank.centroids - truth, axis=1).mean()
    assert gap < 1e-2


def test_centroid_csv_round_trip(tmp_path):
    bank = PrototypeBank(2, 3, momentum=0.5)
    bank.centroids[0] = [1.25, -0.5, 3.0]
    bank.seen[0] = True
    path = tmp_path / "centroids.csv"
    write_centroids_csv(bank, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "class,seen,c0,c1,c2"
    assert lines[1].startswith("0,1,1.25,-0.5,3")
    assert lines[2].startswith("1,0,0,0,0")
