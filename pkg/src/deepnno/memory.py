"""Exemplar memory pruned by distance to class mean, and the rehearsal batch sampler."""

from dataclasses import dataclass
from typing import Dict, Hashable, List, Sequence, Tuple

import numpy as np

from .errors import DuplicateClassError, EmptyDataError, MissingClassError
from .prototypes import PrototypeStore


@dataclass(frozen=True, eq=False)
class LabeledSample:
    x: np.ndarray
    label: Hashable

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=np.float64))

    def __eq__(self, other):
        if not isinstance(other, LabeledSample):
            return NotImplemented
        return self.label == other.label and np.array_equal(self.x, other.x)

    def __hash__(self):
        return hash((self.label, self.x.tobytes()))


Entry = Tuple[LabeledSample, float]


@dataclass(frozen=True)
class BatchSpec:
    batch_size: int = 64
    memory_ratio: float = 0.4

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not 0.0 <= self.memory_ratio <= 1.0:
            raise ValueError("memory_ratio must lie in [0, 1]")

    @property
    def memory_share(self):
        return int(np.floor(self.memory_ratio * self.batch_size))


def relevance(store: PrototypeStore, sample: LabeledSample, net) -> float:
    """Distance of the embedded sample to its class mean (smaller is more relevant)."""
    return store.distance(sample.label, net.forward(sample.x))


def relevances(store: PrototypeStore, samples: Sequence[LabeledSample], net) -> np.ndarray:
    if not samples:
        return np.zeros(0)
    for s in samples:
        if s.label not in store:
            raise MissingClassError(f"class {s.label!r} has no prototype")
    feats = net.forward(np.stack([s.x for s in samples]))
    means = np.stack([store.mean(s.label) for s in samples])
    return np.linalg.norm(feats - means, axis=1)


def _sorted(entries):
    # stable: equal distances keep their incoming order
    return sorted(entries, key=lambda e: e[1])


class ExemplarMemory:
    def __init__(self, capacity=2000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.per_class: Dict[Hashable, List[Entry]] = {}

    def __len__(self):
        return sum(len(v) for v in self.per_class.values())

    def __contains__(self, k):
        return k in self.per_class

    @property
    def class_ids(self):
        return sorted(self.per_class)

    def admit_class(self, class_id, entries: Sequence[Entry]):
        """Insert a new class; entries are kept sorted by ascending distance."""
        if class_id in self.per_class:
            raise DuplicateClassError(f"class {class_id!r} already in memory")
        self.per_class[class_id] = _sorted(entries)
        return self

    def extend_class(self, class_id, entries: Sequence[Entry]):
        """Add entries to a class, creating it if needed."""
        merged = self.per_class.get(class_id, []) + list(entries)
        self.per_class[class_id] = _sorted(merged)
        return self

    def prune(self, known_class_count: int):
        """Keep the ``capacity // known_class_count`` closest exemplars per class."""
        if known_class_count < 1:
            raise ValueError("known_class_count must be >= 1")
        quota = self.capacity // known_class_count
        for k in self.per_class:
            self.per_class[k] = self.per_class[k][:quota]
        # more stored classes than announced would otherwise overflow
        while len(self) > self.capacity:
            quota -= 1
            for k in self.per_class:
                self.per_class[k] = self.per_class[k][:quota]
        return self

    def refresh(self, store: PrototypeStore, net):
        """Recompute every stored distance with the current network and means."""
        for k, entries in self.per_class.items():
            samples = [s for s, _ in entries]
            d = relevances(store, samples, net)
            self.per_class[k] = _sorted(zip(samples, d.tolist()))
        return self

    def samples(self) -> List[LabeledSample]:
        return [s for k in self.class_ids for s, _ in self.per_class[k]]

    def to_records(self):
        return [
            {"class_id": k, "x": s.x.tolist(), "relevance": d}
            for k in self.class_ids
            for s, d in self.per_class[k]
        ]

    @classmethod
    def from_records(cls, capacity, records):
        mem = cls(capacity)
        for r in records:
            mem.per_class.setdefault(r["class_id"], []).append(
                (LabeledSample(r["x"], r["class_id"]), float(r["relevance"]))
            )
        return mem


def sample_batch(mem, new_data: Sequence[LabeledSample], spec: BatchSpec, rng_seed=None):
    """Draw one training batch with ``floor(rho * b)`` exemplars from memory.

    Memory samples are drawn uniformly without replacement; the remainder
    comes from ``new_data``, with replacement only when it is too small.
    ``rng_seed`` may be an int or a ``numpy.random.Generator``.
    """
    rng = np.random.default_rng(rng_seed)
    stored = mem.samples() if mem is not None else []
    if not stored and not new_data:
        raise EmptyDataError("both memory and new data are empty")
    b = spec.batch_size
    n_mem = min(spec.memory_share, len(stored))
    if not new_data:
        n_mem = min(b, len(stored))
    n_new = b - n_mem if new_data else 0
    batch = [stored[i] for i in rng.choice(len(stored), size=n_mem, replace=False)] if n_mem else []
    if n_new:
        replace = len(new_data) < n_new
        batch += [new_data[i] for i in rng.choice(len(new_data), size=n_new, replace=replace)]
    return batch
