"""Desk-scale differentiable models and local SGD.

``logistic`` is multinomial logistic regression without an intercept
(parameters are an (M, p) weight matrix, flattened row-major). ``mlp`` is a
one-hidden-layer tanh network with biases. Both losses are mean
cross-entropy plus (l2_reg / 2) * ||theta||^2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fedrobust.core import NonFiniteError, RngStream
from fedrobust.datagen import Dataset


class DivergenceError(NonFiniteError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    n_features: int
    n_classes: int
    hidden_width: int = 0
    l2_reg: float = 1e-3

    def __post_init__(self):
        if self.kind not in ("logistic", "mlp"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.n_features < 1 or self.n_classes < 2:
            raise ValueError("need n_features >= 1 and n_classes >= 2")
        if self.kind == "mlp" and self.hidden_width < 1:
            raise ValueError("mlp requires hidden_width >= 1")
        if self.l2_reg < 0:
            raise ValueError("l2_reg must be non-negative")

    @property
    def dim(self) -> int:
        p, M, H = self.n_features, self.n_classes, self.hidden_width
        if self.kind == "logistic":
            return M * p
        return H * p + H + M * H + M

    def unflatten(self, theta: np.ndarray):
        p, M, H = self.n_features, self.n_classes, self.hidden_width
        if theta.shape != (self.dim,):
            raise ValueError(f"expected parameter vector of length {self.dim}, got {theta.shape}")
        if self.kind == "logistic":
            return (theta.reshape(M, p),)
        o = 0
        W1 = theta[o : o + H * p].reshape(H, p)
        o += H * p
        b1 = theta[o : o + H]
        o += H
        W2 = theta[o : o + M * H].reshape(M, H)
        o += M * H
        b2 = theta[o : o + M]
        return W1, b1, W2, b2

    def init_params(self, rng: RngStream) -> np.ndarray:
        if self.kind == "logistic":
            return np.zeros(self.dim)
        g = rng.generator()
        p, M, H = self.n_features, self.n_classes, self.hidden_width
        W1 = g.standard_normal((H, p)) / np.sqrt(p)
        W2 = g.standard_normal((M, H)) / np.sqrt(H)
        return np.concatenate([W1.ravel(), np.zeros(H), W2.ravel(), np.zeros(M)])


@dataclass(frozen=True)
class LocalTrainConfig:
    epochs: int = 1
    batch_size: int = 32
    lr: float = 0.1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def scores(spec: ModelSpec, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Class scores (logits) for a batch of feature rows."""
    if spec.kind == "logistic":
        (W,) = spec.unflatten(theta)
        return X @ W.T
    W1, b1, W2, b2 = spec.unflatten(theta)
    return np.tanh(X @ W1.T + b1) @ W2.T + b2


def loss_and_gradient(spec: ModelSpec, theta: np.ndarray, batch: Dataset) -> tuple[float, np.ndarray]:
    return _loss_and_gradient(spec, np.asarray(theta, dtype=np.float64), batch.features, batch.labels)


def _loss_and_gradient(spec: ModelSpec, theta: np.ndarray, X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    N = X.shape[0]
    if X.shape[1] != spec.n_features:
        raise ValueError(f"batch has {X.shape[1]} features, model expects {spec.n_features}")
    reg_loss = 0.5 * spec.l2_reg * float(theta @ theta)
    grad = spec.l2_reg * theta
    if N == 0:
        return reg_loss, grad

    if spec.kind == "logistic":
        (W,) = spec.unflatten(theta)
        z = X @ W.T
    else:
        W1, b1, W2, b2 = spec.unflatten(theta)
        a = np.tanh(X @ W1.T + b1)
        z = a @ W2.T + b2

    zmax = z.max(axis=1, keepdims=True)
    logsumexp = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    data_loss = float(np.mean(logsumexp - z[np.arange(N), y]))
    loss = data_loss + reg_loss
    if not np.isfinite(loss):
        raise NonFiniteError("loss is not finite")

    dz = _softmax(z)
    dz[np.arange(N), y] -= 1.0
    dz /= N
    if spec.kind == "logistic":
        gdata = (dz.T @ X).ravel()
    else:
        gW2 = dz.T @ a
        gb2 = dz.sum(axis=0)
        da = (dz @ W2) * (1.0 - a**2)
        gW1 = da.T @ X
        gb1 = da.sum(axis=0)
        gdata = np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2])
    return loss, grad + gdata


def local_update(
    spec: ModelSpec,
    theta_global: np.ndarray,
    shard: Dataset,
    cfg: LocalTrainConfig,
    rng: RngStream,
    client_id: int | None = None,
) -> np.ndarray:
    """Run ``cfg.epochs`` of mini-batch SGD from ``theta_global`` and return the parameter delta."""
    n = len(shard)
    if n == 0:
        raise ValueError(f"client {client_id}: empty shard")
    theta = np.array(theta_global, dtype=np.float64, copy=True)
    if cfg.lr == 0:
        return np.zeros_like(theta)
    bs = min(cfg.batch_size, n)
    X, y = shard.features, shard.labels
    g = rng.generator()
    for _ in range(cfg.epochs):
        order = g.permutation(n) if bs < n else np.arange(n)
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            with np.errstate(over="ignore", invalid="ignore"):
                try:
                    _, grad = _loss_and_gradient(spec, theta, X[idx], y[idx])
                except NonFiniteError as exc:
                    raise DivergenceError(f"client {client_id}: {exc}") from exc
                theta -= cfg.lr * grad
            if not np.all(np.isfinite(theta)):
                raise DivergenceError(f"client {client_id}: local training diverged")
    return theta - theta_global


def predict(spec: ModelSpec, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. ties go to the lowest class
    return np.argmax(scores(spec, theta, X), axis=1)


def evaluate_error_rate(spec: ModelSpec, theta: np.ndarray, testset: Dataset) -> float:
    if len(testset) == 0:
        raise ValueError("empty test set")
    return float(np.mean(predict(spec, theta, testset.features) != testset.labels))


def evaluate_attack_success(spec: ModelSpec, theta: np.ndarray, triggered: Dataset, target_label: int) -> float:
    if len(triggered) == 0:
        raise ValueError("empty triggered test set")
    return float(np.mean(predict(spec, theta, triggered.features) == target_label))


def hessian_vector_product(spec: ModelSpec, theta: np.ndarray, data: Dataset, v: np.ndarray) -> np.ndarray:
    """Exact Hessian-vector product of the data term of the logistic loss."""
    if spec.kind != "logistic":
        raise ValueError("hessian_vector_product is only available for the logistic model")
    X = data.features
    N = X.shape[0]
    if N == 0:
        return np.zeros_like(v)
    (W,) = spec.unflatten(theta)
    V = v.reshape(W.shape)
    P = _softmax(X @ W.T)
    U = X @ V.T
    # (diag(P) - P P^T) U, row by row
    S = P * U - P * (P * U).sum(axis=1, keepdims=True)
    return (S.T @ X).ravel() / N


def top_eigenvalue(hvp, dim: int, rng, max_iter: int = 200, tol: float = 1e-6) -> float:
    """Largest eigenvalue of a PSD operator by power iteration."""
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = hvp(v)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        new_lam = float(v @ w)
        v = w / norm
        if abs(new_lam - lam) <= tol * max(1.0, abs(new_lam)):
            return max(new_lam, 0.0)
        lam = new_lam
    raise RuntimeError(f"power iteration did not converge in {max_iter} steps")


def estimate_convexity_constants(
    spec: ModelSpec,
    dataset: Dataset,
    rng: RngStream | None = None,
    n_points: int = 8,
    safety: float = 1.5,
) -> tuple[float, float]:
    """Strong-convexity and smoothness constants (mu, lambda) of the regularised logistic loss.

    mu is the ridge coefficient. lambda adds the largest data-term Hessian
    eigenvalue seen at ``n_points`` random parameter vectors (the first is the
    origin), inflated by ``safety``.
    """
    if spec.kind != "logistic":
        raise ValueError("convexity constants are only defined for the logistic model")
    if spec.l2_reg <= 0:
        raise ValueError("strong convexity requires l2_reg > 0")
    rng = rng or RngStream(0, "convexity")
    g = rng.generator()
    top = 0.0
    for k in range(n_points):
        theta = np.zeros(spec.dim) if k == 0 else g.standard_normal(spec.dim)
        top = max(top, top_eigenvalue(lambda v: hessian_vector_product(spec, theta, dataset, v), spec.dim, g))
    return spec.l2_reg, spec.l2_reg + safety * top


@dataclass(frozen=True)
class QuadraticSurrogate:
    """0.5 * ||theta - center||^2 scaled by ``curvature``; a test objective with mu = lambda."""

    center: np.ndarray
    curvature: float = 1.0

    def loss_and_gradient(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        diff = np.asarray(theta, dtype=np.float64) - self.center
        return 0.5 * self.curvature * float(diff @ diff), self.curvature * diff

    def convexity_constants(self) -> tuple[float, float]:
        return self.curvature, self.curvature

    @property
    def minimizer(self) -> np.ndarray:
        return np.asarray(self.center, dtype=np.float64)
