"""Training objective: binary cross-entropy on class scores plus feature distillation.

The printed per-sample term ``log p_truth + sum log(1 - p_other)`` is a
log-likelihood; we minimise its negation. Means are treated as constants
when differentiating; they are refreshed separately after each step.
"""

from dataclasses import dataclass
from typing import Hashable, Mapping, Optional, Sequence

import numpy as np

from .embedding import EmbeddingNetwork, NetworkSnapshot
from .errors import EmptyDataError, InputShapeError, MissingClassError
from .prototypes import PrototypeStore

SCORE_EPS = 1e-7
NORM_EPS = 1e-12


@dataclass(frozen=True)
class LossBreakdown:
    classification: float
    distillation: float
    total: float
    lam: float

    def as_dict(self):
        return {
            "classification": self.classification,
            "distillation": self.distillation,
            "total": self.total,
            "lambda": self.lam,
        }


def _clamped_log_terms(p, is_truth):
    """Loss terms and d(loss)/dp; the clamp has zero derivative where it is active."""
    pc = np.clip(p, SCORE_EPS, 1.0 - SCORE_EPS)
    inside = (p >= SCORE_EPS) & (p <= 1.0 - SCORE_EPS)
    loss = np.where(is_truth, -np.log(pc), -np.log1p(-pc))
    dp = np.where(is_truth, -1.0 / pc, 1.0 / (1.0 - pc)) * inside
    return loss, dp


def classification_loss(scores: Mapping[Hashable, float], truth):
    """Loss of one sample from its class scores, with d(loss)/d(p_k) per class."""
    if truth not in scores:
        raise MissingClassError(f"truth class {truth!r} has no score")
    ids = sorted(scores)
    p = np.array([scores[k] for k in ids], dtype=np.float64)
    is_truth = np.array([k == truth for k in ids])
    terms, dp = _clamped_log_terms(p, is_truth)
    return float(terms.sum()), {k: float(g) for k, g in zip(ids, dp)}


def classification_batch(features, labels: Sequence[Hashable], store: PrototypeStore):
    """Per-sample classification loss and its gradient w.r.t. each feature row.

    Samples whose ground-truth class has no prototype yet contribute zero.
    """
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    ids, means = store.matrix()
    index = {k: j for j, k in enumerate(ids)}
    diff = features[:, None, :] - means[None, :, :]  # (B, K, m)
    d = np.sqrt(np.einsum("bkm,bkm->bk", diff, diff))
    p = np.exp(-0.5 * d)
    truth_idx = np.array([index.get(lab, -1) for lab in labels])
    has_truth = truth_idx >= 0
    is_truth = np.zeros_like(p, dtype=bool)
    is_truth[np.nonzero(has_truth)[0], truth_idx[has_truth]] = True
    terms, dldp = _clamped_log_terms(p, is_truth)
    terms = terms * has_truth[:, None]
    dldp = dldp * has_truth[:, None]
    # dp/dphi = -p/2 * (phi - mu)/||phi - mu||
    coeff = dldp * (-0.5 * p) / np.maximum(d, NORM_EPS)
    grad = np.einsum("bk,bkm->bm", coeff, diff)
    return terms.sum(axis=1), grad


def distillation_terms(current, previous):
    """Feature-drift norm per row and its gradient w.r.t. the current features."""
    diff = np.atleast_2d(current) - np.atleast_2d(previous)
    norm = np.sqrt(np.einsum("bm,bm->b", diff, diff))
    return norm, diff / np.maximum(norm, NORM_EPS)[:, None]


def distillation_loss(net: EmbeddingNetwork, snap: NetworkSnapshot, x):
    """Euclidean distance between current and snapshot features of ``x``."""
    if net.architecture != snap.architecture:
        raise InputShapeError("network and snapshot architectures differ")
    loss, grad = distillation_terms(net.forward(x), snap.forward(x))
    if np.ndim(x) == 1:
        return float(loss[0]), grad[0]
    return loss, grad


def total_loss(
    inputs,
    labels: Sequence[Hashable],
    net: EmbeddingNetwork,
    snap: Optional[NetworkSnapshot],
    store: PrototypeStore,
    lam: float = 1.0,
):
    """Batch-mean of classification + lam * distillation, and parameter gradients.

    Without a snapshot (initial phase) the distillation term is dropped.
    """
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    b = inputs.shape[0]
    if b == 0:
        raise EmptyDataError("empty batch")
    if len(labels) != b:
        raise InputShapeError("labels and inputs differ in length")
    feats, cache = net.forward_with_cache(inputs)

    if len(store):
        cl, grad = classification_batch(feats, labels, store)
    else:
        cl, grad = np.zeros(b), np.zeros_like(feats)
    cl_mean = float(cl.sum() / b)

    dist_mean = 0.0
    if snap is not None:
        if net.architecture != snap.architecture:
            raise InputShapeError("network and snapshot architectures differ")
        dist, dgrad = distillation_terms(feats, snap.forward(inputs))
        dist_mean = float(dist.sum() / b)
        grad = grad + lam * dgrad
    grads = net.backward(cache, grad / b)
    return LossBreakdown(cl_mean, dist_mean, cl_mean + lam * dist_mean, float(lam)), grads
