import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepnno.errors import EmptyModelError, InputShapeError, MissingClassError, NumericError
from deepnno.prototypes import PrototypeStore, scores_from_distances


def test_score_at_mean_is_one():
    store = PrototypeStore(2).update_means([(0, np.array([1.0, 1.0]))])
    assert store.probability_score(0, [1.0, 1.0]) == 1.0


def test_score_at_distance_two():
    store = PrototypeStore(2).update_means([(0, np.zeros(2))])
    assert store.probability_score(0, [2.0, 0.0]) == pytest.approx(math.exp(-1), abs=1e-15)


def test_scores_are_never_clamped():
    assert scores_from_distances(2000.0) == 0.0 or scores_from_distances(2000.0) > 0
    assert scores_from_distances(1400.0) > 0


def test_first_batch_sets_mean():
    store = PrototypeStore(2).update_means([("a", [0.0, 0.0]), ("a", [2.0, 4.0])])
    np.testing.assert_array_equal(store.mean("a"), [1.0, 2.0])
    assert store.count("a") == 2


def test_weighted_update_example():
    store = PrototypeStore(1)
    store.set_mean(0, [0.0], 3)
    store.update_means([(0, [4.0])])
    assert store.mean(0)[0] == pytest.approx(1.0)
    assert store.count(0) == 4


def test_reset_counts_makes_next_batch_replace():
    store = PrototypeStore(1).update_means([(0, [1.0])] * 5)
    store.reset_counts()
    store.update_means([(0, [7.0])])
    assert store.mean(0)[0] == 7.0


@pytest.mark.parametrize("trial", range(100))
def test_streaming_equals_offline_mean(trial):
    """Any partition of a frozen feature set into batches gives the offline mean."""
    rng = np.random.default_rng(trial)
    n, m, K = int(rng.integers(5, 80)), int(rng.integers(1, 6)), int(rng.integers(1, 5))
    feats = rng.normal(scale=rng.uniform(0.1, 50), size=(n, m))
    labels = rng.integers(0, K, size=n)
    order = rng.permutation(n)
    cuts = np.sort(rng.choice(np.arange(1, n), size=int(rng.integers(0, n - 1)), replace=False))
    store = PrototypeStore(m)
    for chunk in np.split(order, cuts):
        store.update_means((int(labels[i]), feats[i]) for i in chunk)
    for k in set(labels.tolist()):
        offline = feats[labels == k].mean(axis=0)
        assert np.max(np.abs(store.mean(k) - offline)) <= 1e-10
        assert store.count(k) == int(np.sum(labels == k))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=40), st.integers(1, 10))
def test_batch_size_one_is_exact_running_mean(values, chunk):
    store = PrototypeStore(1)
    for i in range(0, len(values), chunk):
        store.update_means((0, [v]) for v in values[i:i + chunk])
    assert store.mean(0)[0] == pytest.approx(float(np.mean(values)), abs=1e-9)


def test_distances_matrix(rng):
    store = PrototypeStore(3)
    for k in range(4):
        store.set_mean(k, rng.normal(size=3), 1)
    F = rng.normal(size=(5, 3))
    ids, d = store.distances(F)
    assert ids == [0, 1, 2, 3]
    for b in range(5):
        for j, k in enumerate(ids):
            assert d[b, j] == pytest.approx(store.distance(k, F[b]), abs=1e-14)


def test_errors():
    store = PrototypeStore(2)
    with pytest.raises(EmptyModelError):
        store.matrix()
    with pytest.raises(MissingClassError):
        store.mean(3)
    with pytest.raises(InputShapeError):
        store.update_means([(0, [1.0, 2.0, 3.0])])
    with pytest.raises(NumericError):
        store.update_means([(0, [np.nan, 0.0])])


def test_records_round_trip(rng):
    store = PrototypeStore(2)
    store.set_mean("x", rng.normal(size=2), 7)
    store.set_mean("y", rng.normal(size=2), 2)
    back = PrototypeStore.from_records(2, store.to_records())
    assert back.class_ids == ["x", "y"]
    np.testing.assert_array_equal(back.mean("x"), store.mean("x"))
    assert back.count("x") == 7


def test_copy_is_independent():
    store = PrototypeStore(1).update_means([(0, [1.0])])
    dup = store.copy()
    dup.update_means([(0, [3.0])])
    assert store.mean(0)[0] == 1.0
