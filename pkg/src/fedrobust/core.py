"""Shared domain types: flat vectors, round context and labeled RNG streams."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

# Update vectors and model parameters are both plain 1-d float64 arrays.
UpdateVector = np.ndarray
ModelParams = np.ndarray


class DimensionError(ValueError):
    """Raised when vectors that must share a dimension do not."""


class NonFiniteError(ArithmeticError):
    """Raised when a computation produces NaN or Inf."""


def as_vector(values, name: str = "vector") -> np.ndarray:
    arr = np.array(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise DimensionError(f"{name} must have dimension >= 1")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return arr


def stack_updates(updates) -> np.ndarray:
    """Stack a sequence of update vectors into an (n, d) array."""
    if isinstance(updates, np.ndarray) and updates.ndim == 2:
        arr = updates.astype(np.float64, copy=False)
    else:
        updates = list(updates)
        if not updates:
            raise ValueError("at least one update is required")
        dims = {np.shape(u) for u in updates}
        if len(dims) != 1:
            raise DimensionError(f"updates have mismatched shapes: {sorted(dims)}")
        arr = np.asarray(updates, dtype=np.float64)
        if arr.ndim != 2:
            raise DimensionError("updates must be 1-d vectors")
    if arr.shape[0] == 0:
        raise ValueError("at least one update is required")
    return arr


def l2_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


@dataclass(frozen=True)
class RoundContext:
    round_index: int
    global_lr: float
    client_lr: float

    def __post_init__(self):
        if self.round_index < 0:
            raise ValueError("round_index must be non-negative")
        # global_lr == 0 is allowed so a round can be replayed without moving the model
        if self.global_lr < 0 or self.client_lr <= 0:
            raise ValueError("global_lr must be >= 0 and client_lr > 0")


def apply_global_update(theta, g_hat, ctx: RoundContext) -> np.ndarray:
    """Server step: theta + global_lr * g_hat."""
    theta = np.asarray(theta, dtype=np.float64)
    g_hat = np.asarray(g_hat, dtype=np.float64)
    if theta.shape != g_hat.shape:
        raise DimensionError(f"dimension mismatch: {theta.shape} vs {g_hat.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = theta + ctx.global_lr * g_hat
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"global update produced non-finite parameters in round {ctx.round_index}")
    return out


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream keyed by (seed, label).

    The label is hashed with SHA-256 so the derived entropy does not depend on
    Python's randomized ``hash``; PCG64 output is platform independent.
    """

    seed: int
    stream_label: str = ""

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def _entropy(self) -> list[int]:
        digest = hashlib.sha256(self.stream_label.encode("utf-8")).digest()
        words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 32, 4)]
        return [self.seed & 0xFFFFFFFF, self.seed >> 32, *words]

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(self._entropy())))

    def child(self, *parts) -> "RngStream":
        suffix = "/".join(str(p) for p in parts)
        label = f"{self.stream_label}/{suffix}" if self.stream_label else suffix
        return RngStream(self.seed, label)
