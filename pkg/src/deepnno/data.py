"""Datasets: CSV I/O, synthetic Gaussian clusters, and open-world class splits."""

import csv
import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Hashable, List, Sequence

import numpy as np

from .errors import EmptyDataError, GenerationError, ParseError, SchemaError
from .memory import LabeledSample


def _parse_label(text):
    # integer-looking labels round-trip as ints
    try:
        return int(text)
    except ValueError:
        return text


class Dataset:
    """Labelled input vectors stored as an ``(n, dim)`` array plus a label list."""

    def __init__(self, X, labels: Sequence[Hashable]):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2:
            raise SchemaError(f"expected a 2-D input array, got shape {X.shape}")
        if len(labels) != X.shape[0]:
            raise SchemaError("labels and inputs differ in length")
        self.X = X
        self.labels = list(labels)

    @classmethod
    def from_samples(cls, samples: Sequence[LabeledSample], dim=None):
        if not samples:
            if dim is None:
                raise EmptyDataError("no samples")
            return cls(np.zeros((0, dim)), [])
        return cls(np.stack([s.x for s in samples]), [s.label for s in samples])

    def __len__(self):
        return len(self.labels)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.labels == other.labels and np.array_equal(self.X, other.X)

    @property
    def dim(self):
        return self.X.shape[1]

    @property
    def class_ids(self):
        return sorted(set(self.labels))

    @property
    def samples(self) -> List[LabeledSample]:
        return [LabeledSample(x, k) for x, k in zip(self.X, self.labels)]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.X[idx].reshape(len(idx), self.dim), [self.labels[i] for i in idx])

    def of_class(self, k):
        return self.subset([i for i, lab in enumerate(self.labels) if lab == k])

    def of_classes(self, ks):
        ks = set(ks)
        return self.subset([i for i, lab in enumerate(self.labels) if lab in ks])

    @staticmethod
    def concat(parts):
        parts = list(parts)
        return Dataset(np.vstack([p.X for p in parts]), [k for p in parts for k in p.labels])


def load_csv(path) -> Dataset:
    """Read ``label,f0,...,f{d-1}`` rows; errors name the 1-based file line."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyDataError(f"{path}: empty file") from None
        if not header or header[0].strip() != "label" or len(header) < 2:
            raise SchemaError(f"{path}: header must be label,f0,f1,...")
        width = len(header)
        labels, rows = [], []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != width:
                raise SchemaError(
                    f"{path}: line {line}: expected {width} fields, got {len(row)}"
                )
            try:
                values = [float(c) for c in row[1:]]
            except ValueError as exc:
                raise ParseError(f"{path}: {exc}", line=line) from None
            if not all(math.isfinite(v) for v in values):
                raise ParseError(f"{path}: non-finite value", line=line)
            labels.append(_parse_label(row[0].strip()))
            rows.append(values)
    if not rows:
        raise EmptyDataError(f"{path}: no data rows")
    return Dataset(np.array(rows, dtype=np.float64), labels)


def write_csv(ds: Dataset, path):
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"f{i}" for i in range(ds.dim)])
        for x, k in zip(ds.X, ds.labels):
            w.writerow([k] + [repr(float(v)) for v in x])
    return path


def generate_synthetic(num_classes, samples_per_class, dim=2, cluster_sigma=0.2,
                       min_center_separation=0.8, seed=0, box=None, max_retries=200):
    """Isotropic Gaussian clusters whose centres are pairwise well separated.

    Centres are drawn uniformly from ``[-box, box]^dim`` by rejection; the
    default box grows with the number of classes so packing stays feasible.
    """
    if cluster_sigma <= 0 or min_center_separation <= 0:
        raise GenerationError("cluster_sigma and min_center_separation must be positive")
    if num_classes < 1 or samples_per_class < 1 or dim < 1:
        raise GenerationError("num_classes, samples_per_class and dim must be positive")
    rng = np.random.default_rng(seed)
    if box is None:
        box = min_center_separation * max(1.0, num_classes ** (1.0 / dim))
    centers = []
    for _ in range(max_retries * num_classes):
        if len(centers) == num_classes:
            break
        c = rng.uniform(-box, box, size=dim)
        if all(np.linalg.norm(c - o) >= min_center_separation for o in centers):
            centers.append(c)
    if len(centers) < num_classes:
        raise GenerationError(
            f"could not place {num_classes} centres {min_center_separation} apart in box {box}"
        )
    centers = np.array(centers)
    X = np.concatenate(
        [c + cluster_sigma * rng.standard_normal((samples_per_class, dim)) for c in centers]
    )
    labels = [k for k in range(num_classes) for _ in range(samples_per_class)]
    ds = Dataset(X, labels)
    ds.centers = centers
    return ds


@dataclass
class OpenWorldSplit:
    initial_classes: List[Hashable]
    incremental_classes: List[Hashable]
    unknown_classes: List[Hashable]
    initial_train: Dataset
    train_pools: Dict[Hashable, Dataset]
    test: Dataset

    @property
    def all_classes(self):
        return self.initial_classes + self.incremental_classes + self.unknown_classes


def split_open_world(ds: Dataset, num_known_initial, num_known_total, seed=0,
                     test_fraction=0.3) -> OpenWorldSplit:
    """Randomly partition classes into initial / incremental / never-known,
    and every class's samples into train and test parts."""
    classes = ds.class_ids
    if not 1 <= num_known_initial <= num_known_total <= len(classes):
        raise SchemaError(
            f"need 1 <= initial ({num_known_initial}) <= total known "
            f"({num_known_total}) <= classes ({len(classes)})"
        )
    if not 0 < test_fraction < 1:
        raise SchemaError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    order = [classes[i] for i in rng.permutation(len(classes))]
    initial = order[:num_known_initial]
    incremental = order[num_known_initial:num_known_total]
    unknown = order[num_known_total:]

    pools, test_parts = {}, []
    for k in classes:
        idx = np.array([i for i, lab in enumerate(ds.labels) if lab == k])
        idx = idx[rng.permutation(len(idx))]
        n_test = int(round(test_fraction * len(idx)))
        test_parts.append(np.sort(idx[:n_test]))
        pools[k] = ds.subset(np.sort(idx[n_test:]))
    test = ds.subset(np.concatenate(test_parts))
    initial_train = Dataset.concat(pools[k] for k in initial)
    return OpenWorldSplit(initial, incremental, unknown, initial_train,
                          {k: pools[k] for k in itertools.chain(incremental, unknown)}, test)
