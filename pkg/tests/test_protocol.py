import copy
import logging

import numpy as np
import pytest

from deepnno.benchmark import benchmark_config
from deepnno.data import Dataset, generate_synthetic, split_open_world
from deepnno.errors import (
    DataError,
    EmptyDataError,
    EmptyModelError,
    OracleExhaustedError,
    ProtocolError,
)
from deepnno.memory import BatchSpec, LabeledSample
from deepnno.metrics import MetricsWriter, read_metrics
from deepnno.protocol import (
    GroundTruthOracle,
    HumanVerifiedOracle,
    NoisyWebOracle,
    OwrSession,
    OwrState,
    TrainSettings,
    discover,
    evaluate,
    incremental_step,
    load_checkpoint,
    predict,
    save_checkpoint,
    score_predictions,
    state_from_dict,
    state_to_dict,
    train_initial,
)
from deepnno.rejection import UNKNOWN, known

SETTINGS = TrainSettings.from_config(benchmark_config())


@pytest.fixture(scope="module")
def world():
    # 3 initial clusters plus one to discover, 200 samples each, sigma 0.2
    ds = generate_synthetic(4, 200, dim=2, cluster_sigma=0.2, min_center_separation=1.6, seed=4)
    train_idx = [i for i in range(len(ds)) if i % 4]
    test_idx = [i for i in range(len(ds)) if i % 4 == 0]
    return ds.subset(train_idx), ds.subset(test_idx)


@pytest.fixture(scope="module")
def trained(world):
    train, _ = world
    state = OwrState.fresh(2, memory_capacity=60, seed=0)
    return train_initial(state, train.of_classes([0, 1, 2]), epochs=120, settings=SETTINGS,
                         rng_seed=1, known_classes=[0, 1, 2])


def _fresh_copy(state):
    return copy.deepcopy(state)


# ---------------------------------------------------------------- scoring


def test_score_mixed_example():
    labels = list(range(10)) + ["u"] * 5
    known_set = set(range(10))
    preds = [known(k) for k in range(8)] + [UNKNOWN, known(0)]
    preds += [UNKNOWN, UNKNOWN, UNKNOWN, known(1), known(2)]
    rep = score_predictions(preds, labels, known_set)
    assert rep.closed_world_accuracy == 8 / 10
    assert rep.open_world_accuracy == 11 / 15
    assert rep.rejection_rate_unknown == 3 / 5
    assert rep.false_rejection_rate_known == 1 / 10


def test_score_all_correct_no_unknowns():
    rep = score_predictions([known(0), known(1)], [0, 1], {0, 1})
    assert rep.closed_world_accuracy == rep.open_world_accuracy == 1.0
    assert rep.rejection_rate_unknown is None


def test_score_reject_everything():
    rep = score_predictions([UNKNOWN] * 3, [0, 1, 1], {0, 1})
    assert rep.closed_world_accuracy == rep.open_world_accuracy == 0.0


def test_score_empty():
    with pytest.raises(EmptyDataError):
        score_predictions([], [], {0})


# ---------------------------------------------------------------- initial training


def test_initial_training_on_separable_clusters():
    # 3 clusters, 200 samples each, sigma 0.2, centres 4 sigma apart
    acc = []
    for seed in range(5):
        ds = generate_synthetic(3, 200, dim=2, cluster_sigma=0.2, min_center_separation=0.8,
                                seed=seed)
        sp = split_open_world(ds, 3, 3, seed=seed)
        state = train_initial(OwrState.fresh(2, seed=seed), sp.initial_train, 120, SETTINGS, seed)
        acc.append(evaluate(state, sp.test).closed_world_accuracy)
    assert np.mean(acc) >= 0.95


def test_initial_training_state(trained):
    assert 0 < trained.threshold.theta < 1
    assert len(trained.memory) <= 60
    assert all(len(trained.memory.per_class[k]) >= 1 for k in (0, 1, 2))
    assert trained.snapshot is None
    trained.check_invariants()


def test_initial_rejects_unseen_cluster(trained, world):
    _, test = world
    rep = evaluate(trained, test)
    assert rep.rejection_rate_unknown >= 0.7


def test_train_initial_needs_fresh_state(trained, world):
    with pytest.raises(ProtocolError):
        train_initial(trained, world[0].of_classes([0, 1, 2]), epochs=1)


def test_train_initial_label_mismatch(world):
    state = OwrState.fresh(2, (8,), 4, seed=0)
    with pytest.raises(ProtocolError):
        train_initial(state, world[0].of_classes([0, 1]), epochs=1, known_classes=[0, 1, 2])


def test_zero_epochs_still_builds_means(world):
    state = OwrState.fresh(2, (8,), 4, seed=0)
    train_initial(state, world[0].of_classes([0, 1]), epochs=0)
    assert state.prototypes.class_ids == [0, 1]


# ---------------------------------------------------------------- discovery


def test_discover_queues_unknowns(trained):
    state = _fresh_copy(trained)
    mean0 = state.prototypes.mean(0)
    # the input whose feature is nearest the mean of class 0
    ex = state.memory.per_class[0][0][0].x
    assert discover(state, ex) == known(0)
    assert discover(state, [40.0, -40.0]).is_unknown
    assert len(state.pending) == 1
    assert mean0 is state.prototypes.mean(0)


def test_discover_untrained():
    with pytest.raises(EmptyModelError):
        discover(OwrState.fresh(2, (4,), 2, seed=0), [0.0, 0.0])


# ---------------------------------------------------------------- incremental steps


def _oracle(world, **kw):
    train, _ = world
    return GroundTruthOracle({3: train.of_class(3)}, seed=0, **kw)


def test_incremental_step_adds_class(trained, world, tmp_path):
    state = _fresh_copy(trained)
    _, test = world
    trigger = LabeledSample(test.of_class(3).X[0], 3)
    with MetricsWriter(tmp_path / "m.jsonl") as mw:
        label = incremental_step(state, _oracle(world), trigger, epochs=80, settings=SETTINGS,
                                 rng_seed=3, metrics=mw)
    assert label == 3
    assert state.known_classes == [0, 1, 2, 3]
    assert state.snapshot is not None and state.incremental_step == 1
    state.check_invariants()
    records = read_metrics(tmp_path / "m.jsonl")
    assert len(records) == 80
    assert all(r["phase"] == "incremental" and r["loss"]["lambda"] == 1.0 for r in records)
    assert any(r["loss"]["distillation"] > 0 for r in records)
    assert records[-1]["theta"] == state.threshold.theta
    rep = evaluate(state, test)
    assert rep.per_class_accuracy[3] >= 0.9
    assert len(state.memory) <= 60 and 3 in state.memory


def test_collision_merges(trained, world, caplog):
    state = _fresh_copy(trained)
    train, test = world
    oracle = GroundTruthOracle({1: train.of_class(1)}, n_query=10, seed=0)
    with caplog.at_level(logging.WARNING):
        label = incremental_step(state, oracle, LabeledSample(test.X[0], 1), epochs=2,
                                 settings=SETTINGS, rng_seed=0)
    assert label == 1
    assert state.known_classes == [0, 1, 2]
    assert "oracle-collision" in caplog.text
    state.check_invariants()


def test_step_on_untrained_model(world):
    with pytest.raises(EmptyModelError):
        incremental_step(OwrState.fresh(2, (4,), 2, seed=0), _oracle(world),
                         LabeledSample([0.0, 0.0], 3))


def test_zero_epochs_creates_prototype(trained, world):
    state = _fresh_copy(trained)
    incremental_step(state, _oracle(world), LabeledSample(world[1].X[0], 3), epochs=0,
                     settings=SETTINGS)
    assert 3 in state.prototypes


def test_no_usable_data(trained, world):
    state = _fresh_copy(trained)
    with pytest.raises(EmptyDataError):
        incremental_step(state, _oracle(world, n_query=0), LabeledSample(world[1].X[0], 3),
                         epochs=0, settings=SETTINGS)


def test_threshold_reset_policy(trained, world):
    state = _fresh_copy(trained)
    settings = TrainSettings(batch=BatchSpec(32, 0.4), learning_rate=0.03,
                             reset_threshold_per_step=True)
    incremental_step(state, _oracle(world), LabeledSample(world[1].X[0], 3), epochs=1,
                     settings=settings, rng_seed=0)
    # every batch of the step updated theta once, starting from zero
    assert state.threshold.step == int(np.ceil(len(world[0].of_class(3)) / (32 - 12)))
    kept = _fresh_copy(trained)
    incremental_step(kept, _oracle(world), LabeledSample(world[1].X[0], 3), epochs=1,
                     settings=SETTINGS.__class__(batch=BatchSpec(32, 0.4)), rng_seed=0)
    assert kept.threshold.step > trained.threshold.step


# ---------------------------------------------------------------- oracles


def _pools(world):
    train, _ = world
    return {k: train.of_class(k) for k in (2, 3)}


def test_ground_truth_oracle_returns_label_and_data(world):
    oracle = GroundTruthOracle(_pools(world), n_query=5, seed=0)
    label, data = oracle.query(LabeledSample([0.0, 0.0], 3))
    assert label == 3 and len(data) == 5 and all(s.label == 3 for s in data)


def test_ground_truth_oracle_without_replacement(world):
    oracle = GroundTruthOracle(_pools(world), n_query=7, seed=0)
    seen = set()
    for _ in range(len(world[0].of_class(3)) // 7):
        _, data = oracle.query(LabeledSample([0.0, 0.0], 3))
        rows = {s.x.tobytes() for s in data}
        assert not rows & seen
        seen |= rows
    with pytest.raises(OracleExhaustedError):
        oracle.query(LabeledSample([0.0, 0.0], 3))


def test_ground_truth_oracle_zero_query(world):
    oracle = GroundTruthOracle(_pools(world), n_query=0)
    assert oracle.query(LabeledSample([0.0, 0.0], 2)) == (2, [])


def test_oracle_needs_hidden_label(world):
    with pytest.raises(DataError):
        GroundTruthOracle(_pools(world)).query(LabeledSample([0.0, 0.0], None))


def test_oracle_unknown_class(world):
    with pytest.raises(OracleExhaustedError):
        GroundTruthOracle(_pools(world)).fetch(9)


def test_noisy_oracle_flip_rate():
    n = 4000
    pool = {0: Dataset(np.zeros((n, 2)), [0] * n)}
    oracle = NoisyWebOracle(pool, label_noise_rate=0.2, seed=0, label_space=[0, 1, 2])
    _, data = oracle.query(LabeledSample([0.0, 0.0], 0))
    flipped = [s.label for s in data if s.label != 0]
    assert abs(len(flipped) / n - 0.2) < 0.03
    assert set(flipped) == {1, 2}


def test_noisy_oracle_shared_shift():
    pool = {0: Dataset(np.zeros((50, 3)), [0] * 50)}
    oracle = NoisyWebOracle(pool, feature_shift=0.5, n_query=25, seed=1)
    _, a = oracle.query(LabeledSample([0.0] * 3, 0))
    _, b = oracle.query(LabeledSample([0.0] * 3, 0))
    assert all(np.array_equal(s.x, a[0].x) for s in a)
    assert not np.array_equal(a[0].x, b[0].x)
    assert np.any(a[0].x != 0)


def test_noisy_oracle_vector_shift():
    pool = {0: Dataset(np.zeros((4, 2)), [0] * 4)}
    oracle = NoisyWebOracle(pool, feature_shift=[1.0, -2.0], seed=0)
    _, data = oracle.query(LabeledSample([0.0, 0.0], 0))
    assert all(np.array_equal(s.x, [1.0, -2.0]) for s in data)


def test_noisy_oracle_clean_equals_ground_truth(world):
    a = GroundTruthOracle(_pools(world), n_query=5, seed=3)
    b = NoisyWebOracle(_pools(world), n_query=5, seed=3)
    q = LabeledSample([0.0, 0.0], 2)
    assert a.query(q) == b.query(q)


def test_human_verification_accepts_and_corrects(world):
    replies = iter(["", "n", "3", "2"])
    oracle = HumanVerifiedOracle(GroundTruthOracle(_pools(world), n_query=1),
                                 ask=lambda prompt: next(replies))
    assert oracle.query(LabeledSample([0.0, 0.0], 2))[0] == 2
    assert oracle.query(LabeledSample([0.0, 0.0], 2))[0] == 3
    assert oracle.query(LabeledSample([0.0, 0.0], 3))[0] == 2


# ---------------------------------------------------------------- session


def test_session_learns_after_trigger_count(trained, world):
    state = _fresh_copy(trained)
    session = OwrSession(state, _oracle(world), SETTINGS, trigger_count=2, epochs=2, seed=0)
    far = [40.0, 40.0]
    pred, learned = session.observe(far, hidden_label=3)
    assert pred.is_unknown and learned is None and len(state.pending) == 1
    pred, learned = session.observe(far, hidden_label=3)
    assert learned == 3 and state.pending == []
    assert 3 in state.known_classes


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(trained, world, tmp_path):
    state = _fresh_copy(trained)
    incremental_step(state, _oracle(world), LabeledSample(world[1].X[0], 3), epochs=3,
                     settings=SETTINGS, rng_seed=0)
    state.pending.append(np.array([1.0, 2.0]))
    back = load_checkpoint(save_checkpoint(state, tmp_path / "ck.json"))
    probe = np.random.default_rng(0).normal(scale=2, size=(1000, 2))
    assert predict(back, probe) == predict(state, probe)
    np.testing.assert_array_equal(back.network.forward(probe), state.network.forward(probe))
    assert back.threshold == state.threshold
    assert back.known_classes == state.known_classes
    assert back.memory.samples() == state.memory.samples()
    assert back.snapshot is not None
    np.testing.assert_array_equal(back.snapshot.forward(probe), state.snapshot.forward(probe))
    assert len(back.pending) == 1
    back.check_invariants()


def test_checkpoint_rejects_other_formats(trained):
    doc = state_to_dict(trained)
    doc["version"] = 99
    with pytest.raises(DataError):
        state_from_dict(doc)


def test_checkpoint_unreadable(tmp_path):
    bad = tmp_path / "x.json"
    bad.write_text("{not json")
    with pytest.raises(DataError):
        load_checkpoint(bad)
