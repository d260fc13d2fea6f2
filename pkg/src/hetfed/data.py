"""Synthetic labeled data, label-skewed partitioning, and per-client
feature standardization.

Samples for class c are N(mu_c, I) around a class mean drawn once on a
sphere of radius 3.  Partitioning is either an even i.i.d. shuffle split or
per-class Dirichlet(alpha) label skew; smaller alpha means more skew.  Each
client standardizes its own features (zero mean, unit variance per feature),
which is what makes standard-normal inputs a sensible stand-in for client
data during server-side distillation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SEPARATION_RADIUS = 3.0
_STD_FLOOR = 1e-12
_MAX_PARTITION_RETRIES = 1000


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise ValueError("features must be 2-d and labels 1-d")
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels disagree on sample count")

    @property
    def size(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class PartitionPlan:
    scheme: str  # 'iid' | 'dirichlet'
    clients: int
    alpha: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in ("iid", "dirichlet"):
            raise ValueError(f"unknown partition scheme {self.scheme!r}")
        if self.clients < 1:
            raise ValueError("need at least one client")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")


def gen_synthetic(classes: int, in_dim: int, per_class: int, seed: int) -> Dataset:
    """Deterministic Gaussian-blob classification data, grouped by class."""
    if classes < 1 or in_dim < 1 or per_class < 1:
        raise ValueError("classes, in_dim and per_class must all be >= 1")
    rng = np.random.default_rng(seed)
    features = np.empty((classes * per_class, in_dim))
    labels = np.repeat(np.arange(classes, dtype=np.int64), per_class)
    for c in range(classes):
        direction = rng.standard_normal(in_dim)
        mean = SEPARATION_RADIUS * direction / np.linalg.norm(direction)
        block = slice(c * per_class, (c + 1) * per_class)
        features[block] = mean + rng.standard_normal((per_class, in_dim))
    return Dataset(features, labels)


def _take(dataset: Dataset, idx: np.ndarray) -> Dataset:
    return Dataset(dataset.features[idx].copy(), dataset.labels[idx].copy())


def split_test(dataset: Dataset, fraction: float, rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    """Uniformly held-out split: (train pool, test set)."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    perm = rng.permutation(dataset.size)
    n_test = max(1, int(round(dataset.size * fraction)))
    return _take(dataset, perm[n_test:]), _take(dataset, perm[:n_test])


def partition(dataset: Dataset, plan: PartitionPlan) -> list[Dataset]:
    """Split the dataset across clients, losing and duplicating nothing.

    Dirichlet skew draws, per class, client proportions from
    Dirichlet(alpha * 1) and cuts that class's samples accordingly; the draw
    repeats (bounded) until every client holds at least one sample.
    """
    if dataset.size == 0:
        raise ValueError("cannot partition an empty dataset")
    rng = np.random.default_rng(plan.seed)
    n = plan.clients

    if plan.scheme == "iid":
        chunks = np.array_split(rng.permutation(dataset.size), n)
        if any(len(c) == 0 for c in chunks):
            raise ValueError(f"{n} clients is more than {dataset.size} samples")
        return [_take(dataset, c) for c in chunks]

    class_indices = [np.flatnonzero(dataset.labels == c) for c in np.unique(dataset.labels)]
    for _ in range(_MAX_PARTITION_RETRIES):
        buckets: list[list[int]] = [[] for _ in range(n)]
        for idx in class_indices:
            idx = rng.permutation(idx)
            proportions = rng.dirichlet(np.full(n, plan.alpha))
            cuts = (np.cumsum(proportions)[:-1] * len(idx)).astype(int)
            for bucket, part in zip(buckets, np.split(idx, cuts)):
                bucket.extend(part.tolist())
        if all(buckets):
            return [_take(dataset, rng.permutation(np.asarray(b))) for b in buckets]
    raise ValueError(
        f"could not give each of {n} clients a sample in "
        f"{_MAX_PARTITION_RETRIES} Dirichlet draws"
    )


def feature_moments(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    return dataset.features.mean(axis=0), dataset.features.std(axis=0)


def standardize_with(dataset: Dataset, mean: np.ndarray, std: np.ndarray) -> Dataset:
    """Affine transform with the given moments; near-constant features map to 0."""
    degenerate = std < _STD_FLOOR
    scaled = (dataset.features - mean) / np.where(degenerate, 1.0, std)
    scaled[:, degenerate] = 0.0
    return Dataset(scaled, dataset.labels.copy())


def standardize(dataset: Dataset) -> Dataset:
    """Zero-mean unit-variance per feature, computed on this dataset alone."""
    if dataset.size < 1:
        raise ValueError("cannot standardize an empty dataset")
    mean, std = feature_moments(dataset)
    return standardize_with(dataset, mean, std)
