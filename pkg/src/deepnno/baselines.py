"""Shallow baselines on frozen features: nearest class mean with a linear
metric, and nearest non-outlier with a fixed distance cut-off."""

from dataclasses import dataclass, field
from typing import Hashable, List, Sequence

import numpy as np

from .errors import EmptyDataError, EmptyModelError, InputShapeError, MissingClassError
from .prototypes import PrototypeStore
from .rejection import UNKNOWN, Prediction

NORM_EPS = 1e-12


@dataclass(frozen=True)
class NnoParams:
    tau: float
    eta_tau: float = 1.0

    def __post_init__(self):
        if not (self.tau > 0 and self.eta_tau > 0):
            raise ValueError("tau and eta_tau must be positive")


def identity_metric(m, d=None):
    """``m x d`` projection with ones on the diagonal (plain NCM when ``d == m``)."""
    d = m if d is None else d
    if d < 1:
        raise ValueError("metric dimension must be >= 1")
    return np.eye(m, d)


def _check_w(W, m):
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != m:
        raise InputShapeError(f"W must be {m} x d, got {W.shape}")
    return W


def metric_distance(W, f, mu) -> float:
    f = np.asarray(f, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    if f.shape != mu.shape:
        raise InputShapeError("feature and mean differ in length")
    W = _check_w(W, f.shape[0])
    return float(np.linalg.norm(W.T @ (f - mu)))


def metric_distances(W, store: PrototypeStore, features):
    """Projected distances ``(B, K)`` from each feature row to every class mean."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    W = _check_w(W, store.dim)
    ids, means = store.matrix()
    proj = features @ W
    diff = proj[:, None, :] - (means @ W)[None, :, :]
    return ids, np.sqrt(np.einsum("bkd,bkd->bk", diff, diff))


def ncm_predict(W, store: PrototypeStore, f):
    return ncm_predict_batch(W, store, np.atleast_2d(f))[0]


def ncm_predict_batch(W, store, features) -> List[Hashable]:
    ids, d = metric_distances(W, store, features)
    # argmin returns the first minimum, i.e. the smallest id
    return [ids[j] for j in np.argmin(d, axis=1)]


def ncm_loss_and_grad(W, features, labels: Sequence[Hashable], store: PrototypeStore,
                      normalized=False):
    """Mean negative log score of the true class, and its gradient over ``W``.

    With ``normalized=False`` the score is ``exp(-d/2)`` and the loss is the
    mean of ``d/2``; that objective is minimised by shrinking ``W`` towards
    zero, so ``normalized=True`` (softmax over classes) is what
    :func:`fit_metric` uses to actually learn a projection.
    """
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if features.shape[0] == 0:
        raise EmptyDataError("empty dataset")
    if len(labels) != features.shape[0]:
        raise InputShapeError("labels and features differ in length")
    W = _check_w(W, store.dim)
    ids, means = store.matrix()
    index = {k: j for j, k in enumerate(ids)}
    try:
        t = np.array([index[k] for k in labels])
    except KeyError as exc:
        raise MissingClassError(f"label {exc.args[0]!r} has no prototype") from None
    n = features.shape[0]
    rows = np.arange(n)

    delta = features[:, None, :] - means[None, :, :]          # (M, K, m)
    u = np.einsum("bkm,md->bkd", delta, W)                    # (M, K, d)
    d = np.sqrt(np.einsum("bkd,bkd->bk", u, u))               # (M, K)
    # d(d_k)/dW = delta_k u_k^T / d_k
    coeff = np.zeros_like(d)
    coeff[rows, t] = 0.5 / np.maximum(d[rows, t], NORM_EPS)
    loss = 0.5 * d[rows, t]
    if normalized:
        a = -0.5 * d
        amax = a.max(axis=1, keepdims=True)
        logz = amax[:, 0] + np.log(np.exp(a - amax).sum(axis=1))
        q = np.exp(a - logz[:, None])
        loss = loss + logz
        coeff -= q * 0.5 / np.maximum(d, NORM_EPS)
    grad = np.einsum("bk,bkm,bkd->md", coeff, delta, u) / n
    return float(loss.mean()), grad


def fit_metric(features, labels, store, d=None, steps=200, learning_rate=0.05,
               normalized=True, W0=None):
    """Plain gradient descent on :func:`ncm_loss_and_grad` starting from ``W0``."""
    W = identity_metric(store.dim, d) if W0 is None else np.array(W0, dtype=np.float64)
    for _ in range(steps):
        _, g = ncm_loss_and_grad(W, features, labels, store, normalized=normalized)
        W = W - learning_rate * g
    return W


def nno_score(params: NnoParams, dW) -> float:
    """``eta * (1 - dW / tau)``; negative beyond ``tau``."""
    return params.eta_tau * (1.0 - dW / params.tau)


def nno_predict(params: NnoParams, W, store: PrototypeStore, f) -> Prediction:
    return nno_predict_batch(params, W, store, np.atleast_2d(f))[0]


def nno_predict_batch(params, W, store, features) -> List[Prediction]:
    ids, d = metric_distances(W, store, features)
    p = np.maximum(0.0, nno_score(params, d))
    out = []
    for row in p:
        if not np.any(row > 0):
            out.append(UNKNOWN)
        else:
            out.append(Prediction(ids[int(np.argmax(row))]))
    return out


def _open_accuracy(preds, labels, known):
    ok = [
        (p.is_unknown if lab not in known else p.label == lab)
        for p, lab in zip(preds, labels)
    ]
    return float(np.mean(ok)) if ok else 0.0


def select_tau(W, features, labels, taus=None, val_fraction=0.3, seed=0):
    """Choose ``tau`` by leave-one-class-out validation.

    Each class in turn plays the unknown: means are built from the training
    part of the remaining classes and the candidate ``tau`` is scored by
    open-world accuracy on their validation part plus every sample of the
    held-out class. The best mean accuracy wins; ties go to the smaller tau.
    """
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    labels = list(labels)
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise EmptyModelError("tau selection needs at least two classes")
    rng = np.random.default_rng(seed)
    is_val = rng.random(len(labels)) < val_fraction
    lab_arr = np.array(labels, dtype=object)

    if taus is None:
        full = PrototypeStore(features.shape[1])
        full.update_means(zip(labels, features))
        _, d = metric_distances(W, full, features)
        idx = {k: j for j, k in enumerate(full.class_ids)}
        own = d[np.arange(len(labels)), [idx[k] for k in labels]]
        qs = np.quantile(own, [0.5, 0.75, 0.9, 0.95, 0.99, 1.0])
        taus = np.unique(np.concatenate([qs * s for s in (0.75, 1.0, 1.25, 1.5, 2.0)]))
        taus = taus[taus > 0]

    taus = sorted(float(t) for t in taus)
    scores = np.zeros(len(taus))
    for held in classes:
        train = (~is_val) & (lab_arr != held)
        val = is_val | (lab_arr == held)
        store = PrototypeStore(features.shape[1])
        store.update_means(zip(lab_arr[train], features[train]))
        known = set(store.class_ids)
        val_labels = list(lab_arr[val])
        for i, tau in enumerate(taus):
            preds = nno_predict_batch(NnoParams(tau), W, store, features[val])
            scores[i] += _open_accuracy(preds, val_labels, known)
    return taus[int(np.argmax(scores))]


@dataclass
class NnoModel:
    """Frozen-representation open-world classifier.

    ``W`` and ``tau`` stay fixed once fitted; new classes only add a mean.
    """

    extractor: object
    W: np.ndarray
    params: NnoParams
    store: PrototypeStore = field(default=None)

    def __post_init__(self):
        if self.store is None:
            self.store = PrototypeStore(self.extractor.output_dim)

    def features(self, inputs):
        return self.extractor.forward(np.atleast_2d(inputs))

    def add_class(self, label, inputs):
        feats = self.features(inputs)
        self.store.update_means((label, f) for f in feats)

    @property
    def known_classes(self):
        return self.store.class_ids

    def predict(self, inputs) -> List[Prediction]:
        return nno_predict_batch(self.params, self.W, self.store, self.features(inputs))

    def predict_closed(self, inputs) -> List[Hashable]:
        return ncm_predict_batch(self.W, self.store, self.features(inputs))


def fit_nno(extractor, inputs, labels, tau=None, eta_tau=1.0, learn_metric=False,
            metric_dim=None, metric_steps=200, seed=0) -> NnoModel:
    """Fit an NNO model on the initial classes using a frozen extractor."""
    feats = extractor.forward(np.atleast_2d(inputs))
    labels = list(labels)
    store = PrototypeStore(feats.shape[1])
    store.update_means(zip(labels, feats))
    if learn_metric:
        W = fit_metric(feats, labels, store, d=metric_dim, steps=metric_steps)
    else:
        W = identity_metric(feats.shape[1], metric_dim)
    if tau is None:
        tau = select_tau(W, feats, labels, seed=seed)
    return NnoModel(extractor, W, NnoParams(tau, eta_tau), store)
