"""Running rejection threshold and thresholded nearest-mean prediction."""

from dataclasses import dataclass
from typing import Dict, Hashable, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from .errors import EmptyModelError
from .prototypes import PrototypeStore, scores_from_distances


@dataclass(frozen=True)
class Prediction:
    """Either a known class label or the unknown outcome (``label is None``)."""

    label: Optional[Hashable] = None

    @property
    def is_unknown(self):
        return self.label is None

    def __repr__(self):
        return "Unknown" if self.label is None else f"Known({self.label!r})"


UNKNOWN = Prediction(None)


def known(label) -> Prediction:
    if label is None:
        raise ValueError("a known prediction needs a label")
    return Prediction(label)


@dataclass(frozen=True)
class ThresholdState:
    theta: float = 0.0
    step: int = 0


@dataclass(frozen=True)
class RejectionWeights:
    w_plus: float = 1.0
    w_minus: float = 3.0

    def __post_init__(self):
        if not (self.w_plus > 0 and self.w_minus > 0):
            raise ValueError("rejection weights must be strictly positive")


def _decide(ids: Sequence[Hashable], scores: np.ndarray, theta: float) -> Prediction:
    # ids are sorted, so the first maximum is the smallest class id
    if not np.any(scores > theta):
        return UNKNOWN
    return Prediction(ids[int(np.argmax(scores))])


def predict_from_scores(scores: Mapping[Hashable, float], theta: float) -> Prediction:
    if not scores:
        raise EmptyModelError("no class scores to predict from")
    ids = sorted(scores)
    return _decide(ids, np.array([scores[k] for k in ids], dtype=np.float64), theta)


def predict_deepnno(store: PrototypeStore, ts: ThresholdState, f) -> Prediction:
    """Unknown when every class score is <= theta, else the arg-max class."""
    return predict_batch(store, ts.theta, np.atleast_2d(f))[0]


def predict_batch(store: PrototypeStore, theta: float, features) -> List[Prediction]:
    ids, d = store.distances(features)
    p = scores_from_distances(d)
    return [_decide(ids, row, theta) for row in p]


def sample_weight(k_i, k, p, theta, rw: RejectionWeights) -> float:
    if k_i != k:
        return 0.0
    return rw.w_plus if p > theta else rw.w_minus


def batch_class_average(scores: Iterable[float], theta: float, rw: RejectionWeights):
    """Weighted mean of the ground-truth scores of one class within a batch.

    Accepted samples (``p > theta``) weigh ``w_plus``, rejected ones
    ``w_minus``. Returns None when the class has no sample in the batch.
    """
    p = np.asarray(list(scores), dtype=np.float64)
    if p.size == 0:
        return None
    w = np.where(p > theta, rw.w_plus, rw.w_minus)
    return float(np.dot(w, p) / w.sum())


def class_averages(labels: Sequence[Hashable], truth_scores, theta, rw) -> Dict[Hashable, float]:
    """Per-class weighted averages for every class represented in a batch."""
    truth_scores = np.asarray(truth_scores, dtype=np.float64)
    out = {}
    for k in sorted(set(labels)):
        mask = np.array([lab == k for lab in labels])
        out[k] = batch_class_average(truth_scores[mask], theta, rw)
    return out


def update_threshold(ts: ThresholdState, averages: Iterable[float]) -> ThresholdState:
    """Running-mean update ``theta <- (t theta + mean(averages)) / (t + 1)``.

    With no represented class the state is returned unchanged.
    """
    vals = [a for a in averages if a is not None]
    if not vals:
        return ts
    term = sum(vals) / len(vals)
    t = ts.step
    return ThresholdState((t * ts.theta + term) / (t + 1), t + 1)
