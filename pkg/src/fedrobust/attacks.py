"""Poisoning attacks.

Update-forging attacks see every benign update of the round and return one
forged vector per malicious client. Label flipping and the scaling backdoor
instead poison the malicious clients' data before honest local training.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np

from fedrobust.aggregators import krum_select
from fedrobust.core import RngStream, stack_updates
from fedrobust.datagen import Dataset, inject_trigger_dataset
from fedrobust.models import LocalTrainConfig, ModelSpec, local_update

KINDS = (
    "none",
    "label_flip",
    "gaussian",
    "trim_attack",
    "krum_attack",
    "min_max",
    "min_sum",
    "scaling",
    "mpaf",
    "adaptive_i",
)
DATA_POISONING = ("label_flip", "scaling")

GAUSSIAN_VARIANCE = 200.0
MPAF_MAGNITUDE = 100.0


@dataclass(frozen=True)
class TriggerSpec:
    indices: tuple[int, ...] = (0, 1, 2)
    value: float = 8.0
    target_label: int = 0


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "none"
    malicious_ids: frozenset = frozenset()
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack {self.kind!r}; choose from {', '.join(KINDS)}")
        object.__setattr__(self, "malicious_ids", frozenset(int(i) for i in self.malicious_ids))

    def validate(self, n_clients: int) -> None:
        bad = [i for i in self.malicious_ids if not 0 <= i < n_clients]
        if bad:
            raise ValueError(f"malicious ids out of range: {sorted(bad)}")
        if self.kind != "none" and 2 * len(self.malicious_ids) >= n_clients:
            raise ValueError("the malicious fraction must stay below one half")


def _benign(benign_updates, minimum: int = 1) -> np.ndarray:
    G = stack_updates(benign_updates)
    if G.shape[0] < minimum:
        raise ValueError(f"attack needs at least {minimum} benign updates, got {G.shape[0]}")
    return G


def gaussian_attack(dim: int, n_malicious: int, seed: RngStream, variance: float = GAUSSIAN_VARIANCE) -> list[np.ndarray]:
    if dim < 1:
        raise ValueError("dim must be >= 1")
    draws = seed.generator().normal(0.0, np.sqrt(variance), size=(n_malicious, dim))
    return list(draws)


def trim_attack(benign_updates, n_malicious: int, seed: RngStream, lo: float = 3.0, hi: float = 4.0) -> list[np.ndarray]:
    """Full-knowledge attack on coordinate-wise rules.

    Each coordinate is pushed against the sign of the benign mean by a
    uniform draw between ``lo`` and ``hi`` benign standard deviations.
    """
    G = _benign(benign_updates, 2)
    mu = G.mean(axis=0)
    sd = G.std(axis=0)
    sd = np.where(sd > 0, sd, np.abs(mu) * 0.1 + 1e-6)
    direction = np.where(mu >= 0, 1.0, -1.0)
    u = seed.generator().uniform(lo, hi, size=(n_malicious, G.shape[1]))
    return list(mu - direction * u * sd)


def _unit_mean_direction(mu: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(mu)
    if norm == 0:
        e = np.zeros_like(mu)
        e[0] = 1.0
        return e
    return mu / norm


def krum_attack(
    benign_updates,
    n_malicious: int,
    assumed_f: int,
    seed: RngStream,
    max_iter: int = 50,
    noise_scale: float = 1e-4,
    return_lambda: bool = False,
):
    """Clone -lambda * s (s the unit benign mean) with tiny per-client noise.

    lambda is the largest value in (0, lambda_max] for which Krum over
    benign + malicious selects a malicious update, found by bisection.
    """
    if n_malicious == 0:
        return ([], 0.0) if return_lambda else []
    G = _benign(benign_updates, 1)
    n_benign, d = G.shape
    if n_benign + n_malicious - assumed_f - 2 < 1:
        raise ValueError("krum precondition fails for the combined client set")
    mean = G.mean(axis=0)
    s = _unit_mean_direction(mean)
    noise = seed.generator().standard_normal((n_malicious, d))
    noise /= np.linalg.norm(noise, axis=1, keepdims=True)
    noise *= noise_scale * np.linspace(0.5, 1.0, n_malicious)[:, None]

    def forged(lam: float) -> np.ndarray:
        return -lam * s + lam * noise

    def succeeds(lam: float) -> bool:
        return krum_select(np.vstack([G, forged(lam)]), assumed_f) >= n_benign

    lam_max = float(np.linalg.norm(mean)) * 10.0 + 1.0
    tested = [lam_max]
    if succeeds(lam_max):
        best = lam_max
    else:
        lo, hi, best = 0.0, lam_max, None
        for _ in range(max_iter):
            mid = 0.5 * (lo + hi)
            tested.append(mid)
            if succeeds(mid):
                lo, best = mid, mid
            else:
                hi = mid
            if hi - lo < 1e-6 * lam_max:
                break
        if best is None:
            best = min(tested)
    out = list(forged(best))
    return (out, best) if return_lambda else out


def perturbation_direction(G: np.ndarray, kind: str = "unit_vec") -> np.ndarray:
    mu = G.mean(axis=0)
    if kind == "unit_vec":
        norm = np.linalg.norm(mu)
        p = -mu / norm if norm > 0 else np.zeros_like(mu)
    elif kind == "sign":
        p = -np.sign(mu)
    elif kind == "std":
        p = -G.std(axis=0)
    else:
        raise ValueError(f"unknown perturbation kind {kind!r}")
    if not np.any(p):
        p = np.zeros_like(mu)
        p[0] = 1.0
    return p


def min_max_objective(G: np.ndarray, x: np.ndarray) -> tuple[float, float]:
    """(max distance from x to a benign update, benign diameter)."""
    dx = np.sqrt(((G - x) ** 2).sum(axis=1)).max()
    diff = G[:, None, :] - G[None, :, :]
    diam = np.sqrt((diff**2).sum(-1)).max()
    return float(dx), float(diam)


def min_sum_objective(G: np.ndarray, x: np.ndarray) -> tuple[float, float]:
    """(sum of squared distances from x to benign updates, max benign sum of squared distances)."""
    sx = ((G - x) ** 2).sum()
    diff = G[:, None, :] - G[None, :, :]
    smax = (diff**2).sum(-1).sum(axis=1).max()
    return float(sx), float(smax)


def _bisect_gamma(G, p, objective, gamma_init, max_iter=50, rel_tol=1e-5) -> float:
    mu = G.mean(axis=0)
    if gamma_init <= 0:
        return 0.0

    def feasible(gamma):
        val, bound = objective(G, mu + gamma * p)
        return val <= bound

    if feasible(gamma_init):
        return gamma_init
    lo, hi = 0.0, gamma_init
    for _ in range(max_iter):
        if hi - lo <= rel_tol * gamma_init:
            break
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            lo = mid
        else:
            hi = mid
    return lo


def min_max_attack(benign_updates, n_malicious: int, perturbation_kind: str = "unit_vec", seed: RngStream | None = None, return_gamma: bool = False):
    G = _benign(benign_updates, 2)
    p = perturbation_direction(G, perturbation_kind)
    _, diam = min_max_objective(G, G[0])
    # beyond 2 * diameter / ||p|| the constraint is violated by the triangle inequality
    gamma = _bisect_gamma(G, p, min_max_objective, 2.0 * diam / np.linalg.norm(p))
    mal = G.mean(axis=0) + gamma * p
    out = [mal.copy() for _ in range(n_malicious)]
    return (out, gamma) if return_gamma else out


def min_sum_attack(benign_updates, n_malicious: int, perturbation_kind: str = "unit_vec", seed: RngStream | None = None, return_gamma: bool = False):
    G = _benign(benign_updates, 2)
    p = perturbation_direction(G, perturbation_kind)
    _, smax = min_sum_objective(G, G[0])
    # sum_i ||x - g_i||^2 >= n * gamma^2 * ||p||^2
    gamma = _bisect_gamma(G, p, min_sum_objective, 2.0 * np.sqrt(smax / G.shape[0]) / np.linalg.norm(p))
    mal = G.mean(axis=0) + gamma * p
    out = [mal.copy() for _ in range(n_malicious)]
    return (out, gamma) if return_gamma else out


def backdoor_shard(shard: Dataset, trigger: TriggerSpec) -> Dataset:
    """The shard followed by a triggered, relabelled copy of each example."""
    poisoned = inject_trigger_dataset(shard, trigger.indices, trigger.value, trigger.target_label)
    return Dataset.concat([shard, poisoned])


def scaling_attack(
    spec: ModelSpec,
    theta_global: np.ndarray,
    shard: Dataset,
    trigger: TriggerSpec,
    scale_factor: float,
    cfg: LocalTrainConfig,
    rng: RngStream,
    client_id: int | None = None,
) -> np.ndarray:
    return scale_factor * local_update(spec, theta_global, backdoor_shard(shard, trigger), cfg, rng, client_id)


def mpaf_attack(theta_global, theta_fake, n_malicious: int, magnitude: float = MPAF_MAGNITUDE) -> list[np.ndarray]:
    theta_global = np.asarray(theta_global, dtype=np.float64)
    theta_fake = np.asarray(theta_fake, dtype=np.float64)
    if theta_global.shape != theta_fake.shape:
        raise ValueError("theta_fake and theta_global differ in dimension")
    if magnitude <= 0:
        raise ValueError("magnitude must be positive")
    step = magnitude * (theta_fake - theta_global)
    return [step.copy() for _ in range(n_malicious)]


def default_adaptive_z(n: int, f: int) -> float:
    """z from the supporter-count rule, clamped to [0.1, 1.5]."""
    q = (n - n // 2 - 1 + f) / n
    q = min(max(q, 1e-12), 1 - 1e-12)
    return float(np.clip(NormalDist().inv_cdf(q), 0.1, 1.5))


def adaptive_i_attack(benign_updates, n_malicious: int, z: float | None = None, seed: RngStream | None = None, n_total: int | None = None) -> list[np.ndarray]:
    """Small shift of every coordinate to mean - z * std of the benign updates."""
    G = _benign(benign_updates, 2)
    if z is None:
        z = default_adaptive_z(n_total or G.shape[0] + n_malicious, n_malicious)
    if z < 0:
        raise ValueError("z must be non-negative")
    mal = G.mean(axis=0) - z * G.std(axis=0)
    return [mal.copy() for _ in range(n_malicious)]
