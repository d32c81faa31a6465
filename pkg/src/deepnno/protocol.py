"""Open-world driver: initial training, unknown discovery, oracle-backed
incremental steps, evaluation and checkpoints."""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Hashable, List, Optional, Sequence, Tuple

import numpy as np

from .data import Dataset
from .embedding import EmbeddingNetwork, NetworkSnapshot, Sgd
from .errors import (
    DataError,
    EmptyDataError,
    EmptyModelError,
    OracleExhaustedError,
    ProtocolError,
)
from .losses import LossBreakdown, total_loss
from .memory import BatchSpec, ExemplarMemory, LabeledSample, relevances, sample_batch
from .metrics import NullMetrics
from .prototypes import PrototypeStore, scores_from_distances
from .rejection import (
    Prediction,
    RejectionWeights,
    ThresholdState,
    class_averages,
    predict_batch,
    update_threshold,
)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "deepnno-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class OwrState:
    network: EmbeddingNetwork
    prototypes: PrototypeStore
    memory: ExemplarMemory
    threshold: ThresholdState = field(default_factory=ThresholdState)
    known_classes: List[Hashable] = field(default_factory=list)
    snapshot: Optional[NetworkSnapshot] = None
    incremental_step: int = 0
    pending: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def fresh(cls, input_dim, hidden_sizes=(64, 32), embedding_dim=32, memory_capacity=2000,
              seed=None):
        net = EmbeddingNetwork.create(input_dim, hidden_sizes, embedding_dim, seed=seed)
        return cls(net, PrototypeStore(embedding_dim), ExemplarMemory(memory_capacity))

    @property
    def trained(self):
        return len(self.prototypes) > 0

    def check_invariants(self):
        if sorted(self.known_classes) != self.prototypes.class_ids:
            raise ProtocolError("prototype keys differ from the known-class set")
        if (self.snapshot is not None) != (self.incremental_step >= 1):
            raise ProtocolError("snapshot must exist exactly after the first incremental step")


@dataclass
class TrainSettings:
    """Hyperparameters shared by the initial and incremental phases."""

    batch: BatchSpec = field(default_factory=BatchSpec)
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-5
    lam: float = 1.0
    weights: RejectionWeights = field(default_factory=RejectionWeights)
    count_reset: str = "never"
    reset_threshold_per_step: bool = False
    recompute_means_from_memory: bool = False

    @classmethod
    def from_config(cls, cfg):
        return cls(
            batch=BatchSpec(cfg.batch_size, cfg.memory_ratio),
            learning_rate=cfg.learning_rate,
            momentum=cfg.momentum,
            weight_decay=cfg.weight_decay,
            lam=cfg.lam,
            weights=RejectionWeights(cfg.w_plus, cfg.w_minus),
            count_reset=cfg.count_reset,
            reset_threshold_per_step=cfg.reset_threshold_per_step,
            recompute_means_from_memory=cfg.recompute_means_from_memory,
        )

    def optimizer(self):
        return Sgd(self.learning_rate, self.momentum, self.weight_decay)


# ---------------------------------------------------------------- training


def _train_batch(state: OwrState, X, labels, sgd, settings: TrainSettings) -> LossBreakdown:
    breakdown, grads = total_loss(X, labels, state.network, state.snapshot,
                                  state.prototypes, settings.lam)
    sgd.step(state.network, grads)
    # means and threshold follow the updated network
    feats = state.network.forward(X)
    state.prototypes.update_means(zip(labels, feats))
    ids, d = state.prototypes.distances(feats)
    col = {k: j for j, k in enumerate(ids)}
    truth = scores_from_distances(d[np.arange(len(labels)), [col[k] for k in labels]])
    averages = class_averages(labels, truth, state.threshold.theta, settings.weights)
    state.threshold = update_threshold(state.threshold, averages.values())
    return breakdown


def _mean_breakdown(parts: Sequence[Tuple[LossBreakdown, int]], lam):
    n = sum(w for _, w in parts)
    cl = sum(b.classification * w for b, w in parts) / n
    di = sum(b.distillation * w for b, w in parts) / n
    return LossBreakdown(cl, di, cl + lam * di, lam)


def _emit_epoch(metrics, phase, step, epoch, parts, lam, state):
    if not parts:
        return
    metrics.emit(phase=phase, step=step, epoch=epoch,
                 loss=_mean_breakdown(parts, lam).as_dict(),
                 theta=state.threshold.theta, threshold_step=state.threshold.step)


def _populate_memory(state: OwrState, samples: Sequence[LabeledSample]):
    by_class: Dict[Hashable, List[LabeledSample]] = {}
    for s in samples:
        by_class.setdefault(s.label, []).append(s)
    for k in sorted(by_class):
        d = relevances(state.prototypes, by_class[k], state.network)
        entries = list(zip(by_class[k], d.tolist()))
        if k in state.memory:
            state.memory.extend_class(k, entries)
        else:
            state.memory.admit_class(k, entries)


def _recompute_means(state: OwrState):
    for k in state.known_classes:
        exemplars = [s for s, _ in state.memory.per_class.get(k, [])]
        if exemplars:
            feats = state.network.forward(np.stack([s.x for s in exemplars]))
            state.prototypes.set_mean(k, feats.mean(axis=0), len(exemplars))


def train_initial(state: OwrState, dataset: Dataset, epochs=120, settings=None,
                  rng_seed=None, known_classes=None, metrics=None) -> OwrState:
    """Train the network, means and threshold on the initial classes.

    Only the classification loss is used (no snapshot exists yet). The
    memory is then filled with every training sample and pruned to quota.
    """
    settings = settings or TrainSettings()
    metrics = metrics or NullMetrics()
    if state.known_classes or state.trained or state.incremental_step:
        raise ProtocolError("train_initial needs a fresh state")
    if len(dataset) == 0:
        raise EmptyDataError("empty initial training set")
    present = dataset.class_ids
    if known_classes is not None and sorted(known_classes) != present:
        raise ProtocolError(
            f"initial labels {present} do not match declared classes {sorted(known_classes)}"
        )
    state.known_classes = list(present)
    rng = np.random.default_rng(rng_seed)
    sgd = settings.optimizer()
    b = settings.batch.batch_size
    labels = dataset.labels
    for epoch in range(epochs):
        if settings.count_reset == "epoch":
            state.prototypes.reset_counts()
        order = rng.permutation(len(dataset))
        parts = []
        for start in range(0, len(order), b):
            idx = order[start:start + b]
            X = dataset.X[idx]
            lab = [labels[i] for i in idx]
            parts.append((_train_batch(state, X, lab, sgd, settings), len(idx)))
        _emit_epoch(metrics, "initial", 0, epoch, parts, settings.lam, state)
    if not state.trained:
        # zero epochs: means come straight from the untrained network
        state.prototypes.update_means(zip(labels, state.network.forward(dataset.X)))
    _populate_memory(state, dataset.samples)
    state.memory.prune(len(state.known_classes))
    if settings.recompute_means_from_memory:
        _recompute_means(state)
    return state


# ---------------------------------------------------------------- oracles


class LabelOracle:
    """Supplies a label and training data for a rejected sample.

    ``propose`` guesses the label of a sample; ``fetch`` returns training
    samples for a label. ``query`` chains the two.
    """

    def propose(self, sample: LabeledSample) -> Hashable:
        raise NotImplementedError

    def fetch(self, label) -> List[LabeledSample]:
        raise NotImplementedError

    def query(self, sample: LabeledSample):
        label = self.propose(sample)
        return label, self.fetch(label)


class GroundTruthOracle(LabelOracle):
    """Returns the sample's true label and unseen samples from a per-class pool.

    The simulator reads ``sample.label``; the protocol itself never does.
    ``n_query=None`` hands over the whole remaining pool.
    """

    def __init__(self, pools: Dict[Hashable, Dataset], n_query=None, seed=0):
        rng = np.random.default_rng(seed)
        self._pools = {}
        for k in sorted(pools):
            ds = pools[k]
            self._pools[k] = [ds.samples[i] for i in rng.permutation(len(ds))]
        self._cursor = {k: 0 for k in self._pools}
        self.n_query = n_query

    @property
    def classes(self):
        return sorted(self._pools)

    def remaining(self, label):
        return len(self._pools.get(label, ())) - self._cursor.get(label, 0)

    def propose(self, sample):
        if sample.label is None:
            raise DataError("ground-truth oracle needs the sample's hidden label")
        return sample.label

    def fetch(self, label):
        if label not in self._pools:
            raise OracleExhaustedError(f"no pool for class {label!r}")
        left = self.remaining(label)
        n = left if self.n_query is None else self.n_query
        if n > left or (self.n_query is None and left == 0):
            raise OracleExhaustedError(f"pool for class {label!r} has {left} samples left")
        start = self._cursor[label]
        self._cursor[label] = start + n
        return list(self._pools[label][start:start + n])


class NoisyWebOracle(GroundTruthOracle):
    """Ground-truth oracle degraded like web-retrieved training data.

    Each returned sample's label is swapped for a uniformly random other
    class with probability ``label_noise_rate``. ``feature_shift`` moves
    every input of one query by a shared offset: a vector is used as is,
    a scalar ``s`` draws the offset from ``N(0, s^2 I)`` once per query, so
    the data of a class is displaced as a whole, like a domain gap.
    """

    def __init__(self, pools, label_noise_rate=0.0, feature_shift=0.0, n_query=None,
                 seed=0, label_space=None):
        super().__init__(pools, n_query=n_query, seed=seed)
        if not 0 <= label_noise_rate <= 1:
            raise ValueError("label_noise_rate must lie in [0, 1]")
        self.label_noise_rate = float(label_noise_rate)
        self.feature_shift = np.asarray(feature_shift, dtype=np.float64)
        if not np.all(np.isfinite(self.feature_shift)):
            raise ValueError("feature_shift must be finite")
        self.label_space = sorted(set(label_space or []) | set(self.classes))
        self._noise_rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])

    def fetch(self, label):
        clean = super().fetch(label)
        others = [k for k in self.label_space if k != label]
        offset = self.feature_shift
        if clean and offset.ndim == 0:
            offset = (offset * self._noise_rng.standard_normal(clean[0].x.shape)
                      if offset > 0 else np.zeros(clean[0].x.shape))
        out = []
        for s in clean:
            x, lab = s.x + offset, s.label
            if others and self._noise_rng.random() < self.label_noise_rate:
                lab = others[self._noise_rng.integers(len(others))]
            out.append(LabeledSample(x, lab))
        return out


class HumanVerifiedOracle(LabelOracle):
    """Asks a person to confirm or correct the proposed label before fetching data."""

    def __init__(self, inner: LabelOracle, ask: Optional[Callable[[str], str]] = None):
        self.inner = inner
        self._ask = ask

    def ask(self, prompt):
        return (self._ask or input)(prompt)

    def propose(self, sample):
        guess = self.inner.propose(sample)
        reply = self.ask(f"Unknown object looks like {guess!r}. Accept? [Y/n/<label>] ").strip()
        if reply.lower() in ("", "y", "yes"):
            return guess
        if reply.lower() in ("n", "no"):
            reply = self.ask("Correct label: ").strip()
        try:
            return int(reply)
        except ValueError:
            return reply

    def fetch(self, label):
        return self.inner.fetch(label)


# ---------------------------------------------------------------- discovery


def discover(state: OwrState, x) -> Prediction:
    """Classify one input; unknown outcomes are queued in ``state.pending``."""
    if not state.trained:
        raise EmptyModelError("model has not been trained")
    pred = predict_batch(state.prototypes, state.threshold.theta,
                         state.network.forward(np.atleast_2d(x)))[0]
    if pred.is_unknown:
        state.pending.append(np.asarray(x, dtype=np.float64))
    return pred


def incremental_step(state: OwrState, oracle: LabelOracle, trigger: LabeledSample,
                     epochs=40, settings=None, rng_seed=None, metrics=None):
    """Learn the class behind ``trigger`` from oracle data plus replayed memory.

    Returns the label the oracle assigned. A label that is already known is
    merged into that class instead of creating a second prototype.
    """
    settings = settings or TrainSettings()
    metrics = metrics or NullMetrics()
    if not state.trained:
        raise EmptyModelError("incremental step on an untrained model")
    label, data = oracle.query(trigger)
    known = set(state.known_classes)
    collision = label in known
    kept = [s for s in data if s.label == label or s.label in known]
    if len(kept) < len(data):
        log.info("dropped %d oracle samples with undiscovered labels", len(data) - len(kept))
    if collision:
        log.warning("oracle-collision: label %r is already known; merging", label)
    else:
        state.known_classes.append(label)

    state.snapshot = state.network.snapshot()
    if settings.reset_threshold_per_step:
        state.threshold = ThresholdState()
    if settings.count_reset == "step":
        state.prototypes.reset_counts()

    rng = np.random.default_rng(rng_seed)
    sgd = settings.optimizer()
    spec = settings.batch
    new_share = spec.batch_size - min(spec.memory_share, len(state.memory))
    if kept:
        n_batches = math.ceil(len(kept) / max(1, new_share))
    else:
        n_batches = math.ceil(len(state.memory) / spec.batch_size)
    step = state.incremental_step + 1
    for epoch in range(epochs):
        if settings.count_reset == "epoch":
            state.prototypes.reset_counts()
        parts = []
        for _ in range(n_batches):
            batch = sample_batch(state.memory, kept, spec, rng)
            X = np.stack([s.x for s in batch])
            lab = [s.label for s in batch]
            parts.append((_train_batch(state, X, lab, sgd, settings), len(batch)))
        _emit_epoch(metrics, "incremental", step, epoch, parts, settings.lam, state)

    if label not in state.prototypes:
        # no training batch reached the new class (zero epochs or no data)
        if not kept:
            raise EmptyDataError(f"oracle returned no usable data for {label!r}")
        feats = state.network.forward(np.stack([s.x for s in kept if s.label == label]))
        state.prototypes.update_means((label, f) for f in feats)

    state.memory.refresh(state.prototypes, state.network)
    _populate_memory(state, kept)
    state.memory.prune(len(state.known_classes))
    if settings.recompute_means_from_memory:
        _recompute_means(state)
    state.incremental_step = step
    state.pending = [p for p in state.pending if not np.array_equal(p, trigger.x)]
    return label


class OwrSession:
    """Interactive loop: queue unknowns and learn once enough have piled up.

    After ``trigger_count`` unknown predictions the oldest queued input is
    sent to the oracle and the queue is cleared.
    """

    def __init__(self, state, oracle, settings=None, trigger_count=1, epochs=40,
                 seed=0, metrics=None):
        self.state = state
        self.oracle = oracle
        self.settings = settings or TrainSettings()
        self.trigger_count = trigger_count
        self.epochs = epochs
        self.metrics = metrics
        self._rng = np.random.default_rng(seed)

    def observe(self, x, hidden_label=None):
        pred = discover(self.state, x)
        learned = None
        if len(self.state.pending) >= self.trigger_count:
            trigger = LabeledSample(self.state.pending[0], hidden_label)
            learned = incremental_step(self.state, self.oracle, trigger, self.epochs,
                                       self.settings, self._rng, self.metrics)
            self.state.pending.clear()
        return pred, learned


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    """Accuracies over a labelled test set; None where a denominator is zero."""

    closed_world_accuracy: Optional[float]
    open_world_accuracy: float
    rejection_rate_unknown: Optional[float]
    false_rejection_rate_known: Optional[float]
    per_class_accuracy: Dict[Hashable, float]
    n_known: int
    n_unknown: int

    def as_dict(self):
        return {
            "closed_world_accuracy": self.closed_world_accuracy,
            "open_world_accuracy": self.open_world_accuracy,
            "rejection_rate_unknown": self.rejection_rate_unknown,
            "false_rejection_rate_known": self.false_rejection_rate_known,
            "per_class_accuracy": {str(k): v for k, v in self.per_class_accuracy.items()},
            "n_known": self.n_known,
            "n_unknown": self.n_unknown,
        }


def score_predictions(preds: Sequence[Prediction], labels: Sequence[Hashable],
                      known_classes) -> EvalReport:
    if not labels:
        raise EmptyDataError("empty test set")
    known_set = set(known_classes)
    is_known = np.array([lab in known_set for lab in labels])
    correct = np.array([
        (p.label == lab) if k else p.is_unknown
        for p, lab, k in zip(preds, labels, is_known)
    ])
    rejected = np.array([p.is_unknown for p in preds])
    n_known = int(is_known.sum())
    n_unknown = len(labels) - n_known

    def ratio(num, den):
        return float(num) / den if den else None

    try:
        classes = sorted(set(labels))
    except TypeError:
        # mixed label types: keep order of first appearance
        classes = list(dict.fromkeys(labels))
    per_class = {}
    for k in classes:
        mask = np.array([lab == k for lab in labels])
        per_class[k] = float(correct[mask].mean())
    return EvalReport(
        closed_world_accuracy=ratio(correct[is_known].sum(), n_known),
        open_world_accuracy=float(correct.mean()),
        rejection_rate_unknown=ratio(rejected[~is_known].sum(), n_unknown),
        false_rejection_rate_known=ratio(rejected[is_known].sum(), n_known),
        per_class_accuracy=per_class,
        n_known=n_known,
        n_unknown=n_unknown,
    )


def predict(state: OwrState, X) -> List[Prediction]:
    if not state.trained:
        raise EmptyModelError("model has not been trained")
    return predict_batch(state.prototypes, state.threshold.theta,
                         state.network.forward(np.atleast_2d(X)))


def evaluate(state: OwrState, test: Dataset) -> EvalReport:
    """Closed- and open-world accuracy; labels outside ``known_classes`` are unknown."""
    if len(test) == 0:
        raise EmptyDataError("empty test set")
    return score_predictions(predict(state, test.X), test.labels, state.known_classes)


# ---------------------------------------------------------------- checkpoints


def state_to_dict(state: OwrState):
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "known_classes": list(state.known_classes),
        "incremental_step": state.incremental_step,
        "network": state.network.to_dict(),
        "snapshot": state.snapshot.to_dict() if state.snapshot is not None else None,
        "prototypes": {"dim": state.prototypes.dim, "records": state.prototypes.to_records()},
        "threshold": {"theta": state.threshold.theta, "step": state.threshold.step},
        "memory": {"capacity": state.memory.capacity, "records": state.memory.to_records()},
        "pending": [p.tolist() for p in state.pending],
    }


def state_from_dict(doc) -> OwrState:
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise DataError(
            f"unsupported checkpoint {doc.get('format')!r} v{doc.get('version')!r}"
        )
    snap = doc.get("snapshot")
    return OwrState(
        network=EmbeddingNetwork.from_dict(doc["network"]),
        prototypes=PrototypeStore.from_records(doc["prototypes"]["dim"],
                                               doc["prototypes"]["records"]),
        memory=ExemplarMemory.from_records(doc["memory"]["capacity"], doc["memory"]["records"]),
        threshold=ThresholdState(float(doc["threshold"]["theta"]), int(doc["threshold"]["step"])),
        known_classes=list(doc["known_classes"]),
        snapshot=NetworkSnapshot.from_dict(snap) if snap is not None else None,
        incremental_step=int(doc["incremental_step"]),
        pending=[np.asarray(p, dtype=np.float64) for p in doc.get("pending", [])],
    )


def save_checkpoint(state: OwrState, path):
    path = Path(path)
    path.write_text(json.dumps(state_to_dict(state)))
    return path


def load_checkpoint(path) -> OwrState:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    return state_from_dict(doc)
