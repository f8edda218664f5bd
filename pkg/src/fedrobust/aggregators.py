"""Aggregation rules over stacked client updates.

Every rule takes a sequence of equal-length update vectors (or an (n, d)
array) and returns one vector. The synthetic-update defense replicates the
client update farthest from both coordinate-wise extreme vectors before
handing the augmented set to Trimmed-mean or Median.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fedrobust.core import RngStream, stack_updates

RULES = (
    "fedavg",
    "trim_mean",
    "median",
    "krum",
    "gaussian_trim",
    "gaussian_median",
    "foundation_trim",
    "foundation_median",
)


@dataclass(frozen=True)
class AggregatorSpec:
    rule: str = "fedavg"
    trim_c: int = 0
    synthetic_m: int = 0
    assumed_f: int = 0
    estimate_f: bool = False

    def __post_init__(self):
        if self.rule not in RULES:
            raise ValueError(f"unknown aggregation rule {self.rule!r}; choose from {', '.join(RULES)}")
        if min(self.trim_c, self.synthetic_m, self.assumed_f) < 0:
            raise ValueError("trim_c, synthetic_m and assumed_f must be non-negative")

    @property
    def base(self) -> str:
        """The coordinate-wise rule applied at the end ('trim' or 'median'), if any."""
        if self.rule.endswith("trim") or self.rule == "trim_mean":
            return "trim"
        if self.rule.endswith("median"):
            return "median"
        return self.rule

    @property
    def augments(self) -> bool:
        return self.rule.startswith(("foundation_", "gaussian_"))


@dataclass(frozen=True)
class ScoreTable:
    scores: np.ndarray
    selected: int


def _row_mean(G: np.ndarray) -> np.ndarray:
    # Averaging deviations from the first row keeps the mean of equal rows exact.
    return G[0] + (G - G[0]).mean(axis=0)


def fedavg(updates) -> np.ndarray:
    return _row_mean(stack_updates(updates))


def trimmed_mean(updates, c: int) -> np.ndarray:
    G = stack_updates(updates)
    n = G.shape[0]
    if c < 0 or 2 * c >= n:
        raise ValueError(f"trimmed mean needs 0 <= 2c < n (c={c}, n={n})")
    S = np.sort(G, axis=0)
    return _row_mean(S[c : n - c])


def coordinate_median(updates) -> np.ndarray:
    # np.median averages the two middle values for even counts
    return np.median(stack_updates(updates), axis=0)


def pairwise_sq_distances(G: np.ndarray) -> np.ndarray:
    diff = G[:, None, :] - G[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def krum_scores(updates, assumed_f: int) -> np.ndarray:
    G = stack_updates(updates)
    n = G.shape[0]
    k = n - assumed_f - 2
    if k < 1:
        raise ValueError(f"krum needs n - f - 2 >= 1 (n={n}, f={assumed_f})")
    D = pairwise_sq_distances(G)
    np.fill_diagonal(D, np.inf)
    return np.sort(D, axis=1)[:, :k].sum(axis=1)


def krum_select(updates, assumed_f: int) -> int:
    return int(np.argmin(krum_scores(updates, assumed_f)))


def krum(updates, assumed_f: int) -> np.ndarray:
    G = stack_updates(updates)
    return G[krum_select(G, assumed_f)].copy()


def extreme_vectors(updates) -> tuple[np.ndarray, np.ndarray]:
    G = stack_updates(updates)
    return G.max(axis=0), G.min(axis=0)


def closeness_scores(updates) -> ScoreTable:
    """s_i = min(||g_i - g_max||, ||g_i - g_min||); selects the first maximiser."""
    G = stack_updates(updates)
    if G.shape[0] < 2:
        raise ValueError("closeness scores need at least two updates")
    g_max, g_min = extreme_vectors(G)
    to_max = np.sqrt(((G - g_max) ** 2).sum(axis=1))
    to_min = np.sqrt(((G - g_min) ** 2).sum(axis=1))
    s = np.minimum(to_max, to_min)
    return ScoreTable(scores=s, selected=int(np.argmax(s)))


def synthetic_augment(updates, m: int) -> tuple[np.ndarray, ScoreTable]:
    """Client updates followed by ``m`` copies of the selected update."""
    G = stack_updates(updates)
    table = closeness_scores(G)
    synth = np.repeat(G[table.selected][None, :], m, axis=0)
    return np.vstack([G, synth]), table


def gaussian_augment(updates, m: int, rng: RngStream) -> np.ndarray:
    """Client updates followed by ``m`` draws from the per-coordinate client Gaussian."""
    G = stack_updates(updates)
    if G.shape[0] < 2:
        raise ValueError("gaussian synthesis needs at least two updates")
    mu = G.mean(axis=0)
    sd = G.std(axis=0)
    z = rng.generator().standard_normal((m, G.shape[1]))
    # sd == 0 yields exactly mu
    return np.vstack([G, mu + z * sd])


def _base_rule(G: np.ndarray, spec: AggregatorSpec, c: int) -> np.ndarray:
    if spec.base == "trim":
        return trimmed_mean(G, c)
    return coordinate_median(G)


def foundation_aggregate(updates, spec: AggregatorSpec, trim_c: int | None = None) -> tuple[np.ndarray, ScoreTable]:
    aug, table = synthetic_augment(updates, spec.synthetic_m)
    c = spec.trim_c if trim_c is None else trim_c
    return _base_rule(aug, spec, c), table


def gaussian_synthetic_aggregate(updates, spec: AggregatorSpec, rng: RngStream, trim_c: int | None = None) -> np.ndarray:
    aug = gaussian_augment(updates, spec.synthetic_m, rng)
    c = spec.trim_c if trim_c is None else trim_c
    return _base_rule(aug, spec, c)


def cosine_distance_matrix(updates) -> np.ndarray:
    """1 - cosine similarity; rows involving a zero vector are 1 off the diagonal."""
    G = stack_updates(updates)
    norms = np.linalg.norm(G, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    U = G / safe[:, None]
    # explicit pairwise products keep each entry independent of row order
    D = 1.0 - np.clip((U[:, None, :] * U[None, :, :]).sum(-1), -1.0, 1.0)
    zero = norms == 0
    D[zero, :] = 1.0
    D[:, zero] = 1.0
    np.fill_diagonal(D, 0.0)
    return D


def two_means(X: np.ndarray, rng: np.random.Generator, max_iter: int = 100) -> np.ndarray | None:
    """Lloyd's 2-means with k-means++ seeding.

    Returns a 0/1 label per row, or None when all rows coincide (no second
    centre can be seeded).
    """
    n = X.shape[0]
    first = int(rng.integers(n))
    d2 = ((X - X[first]) ** 2).sum(axis=1)
    total = d2.sum()
    if total <= 0:
        return None
    second = int(rng.choice(n, p=d2 / total))
    centers = np.stack([X[first], X[second]])
    labels = np.full(n, -1)
    for _ in range(max_iter):
        dist = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        # ties go to cluster 0
        new = (dist[:, 1] < dist[:, 0]).astype(np.int64)
        if np.array_equal(new, labels):
            break
        labels = new
        for k in (0, 1):
            if np.any(labels == k):
                centers[k] = X[labels == k].mean(axis=0)
    return labels


def estimate_f(updates, rng: RngStream | None = None) -> int:
    """Size of the smaller cluster when 2-means splits rows of the cosine-distance matrix."""
    G = stack_updates(updates)
    n = G.shape[0]
    if n < 2:
        raise ValueError("estimate_f needs at least two updates")
    D = cosine_distance_matrix(G)
    if np.all(D <= 1e-12):
        return 0
    # Sort rows into a canonical order so the seeding does not depend on client order.
    order = np.lexsort(np.sort(D, axis=1).T[::-1])
    X = D[order][:, order]
    labels = two_means(X, (rng or RngStream(0, "estimate_f")).generator())
    if labels is None:
        return 0
    ones = int(labels.sum())
    return min(ones, n - ones)


def aggregate(updates, spec: AggregatorSpec, rng: RngStream | None = None) -> tuple[np.ndarray, dict]:
    """Apply ``spec`` and return (aggregate, info).

    ``info`` carries the effective trim count, the selected client index
    (foundation rules and Krum, else -1) and the augmented set used for
    variance diagnostics.
    """
    G = stack_updates(updates)
    c = spec.trim_c
    if spec.estimate_f and spec.base in ("trim", "krum"):
        c = estimate_f(G, rng.child("estimate_f") if rng else None)
        count = G.shape[0] + (spec.synthetic_m if spec.augments else 0)
        c = min(c, (count - 1) // 2)
    info = {"trim_c": c, "selected": -1, "augmented": G}
    if spec.rule == "fedavg":
        out = fedavg(G)
    elif spec.rule == "trim_mean":
        out = trimmed_mean(G, c)
    elif spec.rule == "median":
        out = coordinate_median(G)
    elif spec.rule == "krum":
        f = min(c, G.shape[0] - 3) if spec.estimate_f else spec.assumed_f
        idx = krum_select(G, f)
        info["selected"] = idx
        out = G[idx].copy()
    elif spec.rule.startswith("foundation_"):
        aug, table = synthetic_augment(G, spec.synthetic_m)
        info.update(selected=table.selected, augmented=aug, scores=table.scores)
        out = _base_rule(aug, spec, c)
    else:
        if rng is None:
            raise ValueError("gaussian synthesis requires an RngStream")
        aug = gaussian_augment(G, spec.synthetic_m, rng.child("gaussian_synth"))
        info["augmented"] = aug
        out = _base_rule(aug, spec, c)
    return out, info
