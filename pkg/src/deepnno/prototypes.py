"""Per-class mean vectors with streaming batch updates and exp-distance scores."""

from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, Hashable, Iterable, List, Tuple

import numpy as np

from .errors import EmptyModelError, InputShapeError, MissingClassError, NumericError


@dataclass
class ClassPrototype:
    class_id: Hashable
    mean: np.ndarray
    count: int


def scores_from_distances(d):
    """Class probability score exp(-d/2); strictly positive, no clamping."""
    return np.exp(-0.5 * np.asarray(d, dtype=np.float64))


class PrototypeStore:
    """Running class means ``mu_k`` with their sample counts ``n_k``.

    Class ids only need to be hashable and mutually orderable; iteration
    and tie-breaking always follow ``sorted`` order.
    """

    def __init__(self, dim: int):
        self.dim = int(dim)
        self.prototypes: Dict[Hashable, ClassPrototype] = {}

    def __contains__(self, k):
        return k in self.prototypes

    def __len__(self):
        return len(self.prototypes)

    @property
    def class_ids(self) -> List[Hashable]:
        return sorted(self.prototypes)

    def mean(self, k):
        return self._get(k).mean

    def count(self, k):
        return self._get(k).count

    def _get(self, k) -> ClassPrototype:
        try:
            return self.prototypes[k]
        except KeyError:
            raise MissingClassError(f"class {k!r} has no prototype") from None

    def _feature(self, f):
        f = np.asarray(f, dtype=np.float64)
        if f.shape[-1] != self.dim:
            raise InputShapeError(f"feature length {f.shape[-1]} != store dim {self.dim}")
        return f

    def matrix(self) -> Tuple[List[Hashable], np.ndarray]:
        """Sorted class ids and the matching ``(K, m)`` mean matrix."""
        if not self.prototypes:
            raise EmptyModelError("prototype store is empty")
        ids = self.class_ids
        return ids, np.stack([self.prototypes[k].mean for k in ids])

    def distance(self, k, f) -> float:
        f = self._feature(f)
        return float(np.linalg.norm(f - self._get(k).mean))

    def probability_score(self, k, f) -> float:
        return float(scores_from_distances(self.distance(k, f)))

    def distances(self, features):
        """Distances from each feature row to every mean, shape ``(B, K)``."""
        features = np.atleast_2d(self._feature(features))
        ids, means = self.matrix()
        diff = features[:, None, :] - means[None, :, :]
        return ids, np.sqrt(np.einsum("bkm,bkm->bk", diff, diff))

    def scores_all(self, f) -> Dict[Hashable, float]:
        if not self.prototypes:
            raise EmptyModelError("prototype store is empty")
        return {k: self.probability_score(k, f) for k in self.class_ids}

    def update_means(self, batch: Iterable[Tuple[Hashable, np.ndarray]]):
        """Fold a batch of ``(class_id, feature)`` pairs into the running means.

        ``mu_k <- (n_k mu_k + n_kB mu_kB) / (n_k + n_kB)``; a class seen for
        the first time starts from ``n_k = 0``.
        """
        grouped = defaultdict(list)
        for k, f in batch:
            f = self._feature(f)
            if f.ndim != 1:
                raise InputShapeError("update_means expects one feature per pair")
            if not np.all(np.isfinite(f)):
                raise NumericError(f"non-finite feature for class {k!r}")
            grouped[k].append(f)
        for k, feats in grouped.items():
            n_b = len(feats)
            mu_b = np.mean(feats, axis=0)
            proto = self.prototypes.get(k)
            if proto is None or proto.count == 0:
                self.prototypes[k] = ClassPrototype(k, mu_b, n_b)
                continue
            n = proto.count
            proto.mean = (n * proto.mean + n_b * mu_b) / (n + n_b)
            proto.count = n + n_b
        return self

    def reset_counts(self):
        """Zero every ``n_k`` so the next batch replaces the stored mean."""
        for proto in self.prototypes.values():
            proto.count = 0

    def set_mean(self, k, mean, count):
        mean = self._feature(mean)
        self.prototypes[k] = ClassPrototype(k, np.array(mean, dtype=np.float64), int(count))

    def copy(self):
        out = PrototypeStore(self.dim)
        for k, p in self.prototypes.items():
            out.prototypes[k] = ClassPrototype(k, p.mean.copy(), p.count)
        return out

    def to_records(self):
        return [
            {"class_id": k, "count": self.prototypes[k].count,
             "mean": self.prototypes[k].mean.tolist()}
            for k in self.class_ids
        ]

    @classmethod
    def from_records(cls, dim, records):
        store = cls(dim)
        for r in records:
            store.set_mean(r["class_id"], r["mean"], r["count"])
        return store
