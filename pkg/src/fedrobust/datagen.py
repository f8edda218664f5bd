"""Synthetic classification data, Non-IID client partitioning and data poisoning transforms."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from fedrobust.core import RngStream


@dataclass(frozen=True)
class LabeledExample:
    features: np.ndarray
    label: int


@dataclass
class Dataset:
    """Examples stored column-wise: ``features`` is (N, p), ``labels`` is (N,)."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise ValueError("features must be (N, p) and labels (N,)")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.features.shape[1])

    def __getitem__(self, i: int) -> LabeledExample:
        return LabeledExample(self.features[i].copy(), int(self.labels[i]))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx])

    @classmethod
    def from_examples(cls, examples: Sequence[LabeledExample]) -> "Dataset":
        examples = list(examples)
        if not examples:
            raise ValueError("cannot build a dataset from zero examples")
        return cls(np.stack([e.features for e in examples]), np.array([e.label for e in examples]))

    @classmethod
    def concat(cls, parts: Sequence["Dataset"]) -> "Dataset":
        return cls(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
        )


@dataclass
class DatasetShard(Dataset):
    owner_client: int = -1


@dataclass(frozen=True)
class PartitionConfig:
    n_clients: int
    n_classes: int
    bias: float
    seed: RngStream = field(default_factory=lambda: RngStream(0, "partition"))

    def __post_init__(self):
        if self.n_clients < 1 or self.n_classes < 1:
            raise ValueError("n_clients and n_classes must be positive")
        if not (1.0 / self.n_classes - 1e-12 <= self.bias <= 1.0):
            raise ValueError(f"bias h must lie in [1/M, 1], got {self.bias}")


def _class_means(n_classes: int, n_features: int, separation: float, rng) -> np.ndarray:
    # Means share one norm so a linear model without intercept can separate them.
    dirs = rng.standard_normal((n_classes, n_features))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    if n_classes == 1:
        return dirs * separation
    diff = dirs[:, None, :] - dirs[None, :, :]
    dist = np.sqrt((diff**2).sum(-1))
    min_dist = dist[~np.eye(n_classes, dtype=bool)].min()
    if min_dist <= 1e-9:
        raise ValueError("degenerate class means; use more features")
    return dirs * (separation / min_dist)


def generate_synthetic_classification(
    n_examples: int,
    n_classes: int,
    n_features: int,
    separation: float,
    seed: RngStream | int,
) -> Dataset:
    """Gaussian blobs with unit covariance, one per class.

    Class means lie on a common sphere with pairwise distance at least
    ``separation``. Labels are balanced to within one example and the row
    order is shuffled.
    """
    if n_classes < 1 or n_features < 1:
        raise ValueError("n_classes and n_features must be positive")
    if n_examples < n_classes:
        raise ValueError(f"need n_examples >= n_classes ({n_examples} < {n_classes})")
    if not separation > 0:
        raise ValueError("separation must be positive")
    stream = seed if isinstance(seed, RngStream) else RngStream(int(seed), "data")
    rng = stream.generator()
    means = _class_means(n_classes, n_features, separation, rng)
    labels = np.arange(n_examples) % n_classes
    rng.shuffle(labels)
    features = means[labels] + rng.standard_normal((n_examples, n_features))
    return Dataset(features, labels)


def train_test_split(data: Dataset, test_fraction: float, seed: RngStream) -> tuple[Dataset, Dataset]:
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    perm = seed.generator().permutation(len(data))
    n_test = int(round(test_fraction * len(data)))
    return data.subset(np.sort(perm[n_test:])), data.subset(np.sort(perm[:n_test]))


def client_clusters(n_clients: int, n_classes: int) -> list[list[int]]:
    """Round-robin grouping: client i belongs to cluster i mod M."""
    return [list(range(c, n_clients, n_classes)) for c in range(n_classes)]


def assign_clients(labels: np.ndarray, cfg: PartitionConfig, rng) -> np.ndarray:
    """Draw an owning client for each label.

    The cluster is ``y`` with probability h and each other cluster with
    probability (1-h)/(M-1); the client is then uniform within the cluster.
    Clusters without clients (n < M) are skipped by renormalising.
    """
    M, h = cfg.n_classes, cfg.bias
    clusters = client_clusters(cfg.n_clients, M)
    sizes = np.array([len(c) for c in clusters])
    if np.any(labels < 0) or np.any(labels >= M):
        raise ValueError("labels must lie in [0, M)")
    if M == 1:
        probs = np.ones((1, 1))
    else:
        probs = np.full((M, M), (1.0 - h) / (M - 1))
        np.fill_diagonal(probs, h)
    probs = probs * (sizes > 0)
    probs /= probs.sum(axis=1, keepdims=True)
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(labels.shape[0])
    cluster = (u[:, None] >= cdf[labels]).sum(axis=1)
    cluster = np.minimum(cluster, M - 1)
    pick = rng.random(labels.shape[0])
    within = np.floor(pick * sizes[cluster]).astype(np.int64)
    # client id of the j-th member of cluster c is c + j*M
    return cluster + within * M


def partition_non_iid(data: Dataset, cfg: PartitionConfig, max_retries: int = 16) -> list[DatasetShard]:
    """Split ``data`` into one shard per client with label-skew ``cfg.bias``."""
    for attempt in range(max_retries + 1):
        rng = cfg.seed.child("attempt", attempt).generator()
        owner = assign_clients(data.labels, cfg, rng)
        counts = np.bincount(owner, minlength=cfg.n_clients)
        if np.all(counts > 0):
            shards = []
            for i in range(cfg.n_clients):
                idx = np.flatnonzero(owner == i)
                shards.append(DatasetShard(data.features[idx], data.labels[idx], owner_client=i))
            return shards
    raise ValueError(
        f"partition left a client with no data after {max_retries} retries; "
        "use a larger dataset or fewer clients"
    )


def flip_labels(shard: Dataset, n_classes: int) -> Dataset:
    """Label-flipping poison: y -> M - y - 1."""
    labels = np.asarray(shard.labels)
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise ValueError("labels must lie in [0, M)")
    flipped = n_classes - labels - 1
    if isinstance(shard, DatasetShard):
        return DatasetShard(shard.features.copy(), flipped, owner_client=shard.owner_client)
    return Dataset(shard.features.copy(), flipped)


def _check_trigger(trigger_indices, n_features: int) -> np.ndarray:
    idx = np.asarray(list(trigger_indices), dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= n_features):
        raise IndexError(f"trigger index out of range for {n_features} features: {idx.tolist()}")
    return idx


def inject_trigger(example: LabeledExample, trigger_indices, trigger_value: float, target_label: int) -> LabeledExample:
    idx = _check_trigger(trigger_indices, example.features.shape[0])
    feats = np.array(example.features, dtype=np.float64, copy=True)
    feats[idx] = trigger_value
    return LabeledExample(feats, int(target_label))


def inject_trigger_dataset(data: Dataset, trigger_indices, trigger_value: float, target_label: int) -> Dataset:
    """Vectorised ``inject_trigger`` applied to every example."""
    idx = _check_trigger(trigger_indices, data.n_features)
    feats = data.features.copy()
    feats[:, idx] = trigger_value
    return Dataset(feats, np.full(len(data), int(target_label)))


def backdoor_testset(test: Dataset, trigger_indices, trigger_value: float, target_label: int) -> Dataset:
    """Triggered copies of test examples whose true label is not the target."""
    keep = np.flatnonzero(test.labels != target_label)
    return inject_trigger_dataset(test.subset(keep), trigger_indices, trigger_value, target_label)


def save_dataset(data: Dataset, path) -> None:
    """One example per line: comma-separated features followed by the label."""
    with open(Path(path), "w", encoding="utf-8") as fh:
        for x, y in zip(data.features, data.labels):
            fh.write(",".join(repr(float(v)) for v in x))
            fh.write(f",{int(y)}\n")


def load_dataset(path) -> Dataset:
    rows = []
    labels = []
    with open(Path(path), encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) < 2:
                raise ValueError(f"{path}:{lineno}: expected features and a label")
            rows.append([float(v) for v in parts[:-1]])
            labels.append(int(parts[-1]))
    if not rows:
        raise ValueError(f"{path}: no examples")
    return Dataset(np.array(rows), np.array(labels))
