"""Convergence diagnostics for the strongly convex (regularised logistic) task.

A gradient step with client rate 1/lambda contracts the distance to the
optimum by q = 1 - mu / (mu + lambda). Federated rounds with stochastic local
training, robust aggregation or attacks add a per-round floor b, so we fit the
smallest b >= 0 with ||theta_{t+1} - theta*|| <= q ||theta_t - theta*|| + b.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from fedrobust.datagen import Dataset
from fedrobust.harness.config import ExperimentConfig
from fedrobust.harness.engine import build_environment, initial_state, run_round
from fedrobust.models import ModelSpec, estimate_convexity_constants, hessian_vector_product, loss_and_gradient


class SolverError(RuntimeError):
    pass


def contraction_factor(mu: float, lam: float) -> float:
    return 1.0 - mu / (mu + lam)


def fit_contraction_floor(distances, q: float) -> float:
    d = np.asarray(distances, dtype=np.float64)
    if d.size < 2:
        return 0.0
    return float(max(0.0, np.max(d[1:] - q * d[:-1])))


def global_objective(spec: ModelSpec, shards: list[Dataset]):
    """(1/n) * sum_i L_i(theta): every client weighs equally regardless of shard size."""
    n = len(shards)

    def f(theta):
        total, grad = 0.0, np.zeros(spec.dim)
        for s in shards:
            l, g = loss_and_gradient(spec, theta, s)
            total += l
            grad += g
        return total / n, grad / n

    def hessp(theta, v):
        hv = sum(hessian_vector_product(spec, theta, s, v) for s in shards) / n
        return hv + spec.l2_reg * v

    return f, hessp


def solve_optimum(spec: ModelSpec, shards: list[Dataset], tol: float = 1e-10, max_newton: int = 50) -> np.ndarray:
    """Minimise the global objective to gradient norm < ``tol``."""
    f, hessp = global_objective(spec, shards)
    res = minimize(lambda th: f(th), np.zeros(spec.dim), jac=True, method="L-BFGS-B", options={"maxiter": 5000, "gtol": 1e-9})
    theta = res.x
    from scipy.sparse.linalg import LinearOperator, cg

    for _ in range(max_newton):
        _, g = f(theta)
        if np.linalg.norm(g) < tol:
            return theta
        H = LinearOperator((spec.dim, spec.dim), matvec=lambda v, th=theta: hessp(th, v))
        step, _ = cg(H, -g, rtol=1e-12, maxiter=10 * spec.dim)
        theta = theta + step
    _, g = f(theta)
    if np.linalg.norm(g) < tol:
        return theta
    raise SolverError(f"optimum solver stopped at gradient norm {np.linalg.norm(g):.3e}")


@dataclass
class ConvergenceReport:
    mu: float
    lam: float
    q: float
    distances: np.ndarray
    floor: float
    clean_floor: float
    noise_floor: float
    bounded: bool

    @property
    def clean_within_noise(self) -> bool:
        return self.clean_floor <= 10.0 * self.noise_floor + 1e-12


def _distances(cfg: ExperimentConfig, theta_star: np.ndarray, gd_lr: float | None = None):
    """Distances to theta* per round; optionally also the gap to an exact gradient step."""
    env = build_environment(cfg)
    state = initial_state(env)
    f = None
    if gd_lr is not None:
        f, _ = global_objective(env.model, env.shards)
    dist = [float(np.linalg.norm(state.theta - theta_star))]
    gaps = []
    for _ in range(cfg.experiment.rounds):
        prev = state.theta
        state, _ = run_round(env, state)
        dist.append(float(np.linalg.norm(state.theta - theta_star)))
        if f is not None:
            _, g = f(prev)
            gaps.append(float(np.linalg.norm(state.theta - (prev - gd_lr * g))))
    return np.array(dist), gaps


def convergence_diagnostic(cfg: ExperimentConfig, client_lr: float | None = None) -> ConvergenceReport:
    """Fit the contraction floor of ``cfg`` and compare its attack-free version to SGD noise.

    The client learning rate is set to 1/lambda unless ``client_lr`` is given.
    Three runs are made: ``cfg`` as is, ``cfg`` without the attack, and plain
    FedAvg without the attack; the last one measures how far stochastic local
    training strays from an exact gradient step (the noise floor).
    """
    if cfg.model.kind != "logistic" or cfg.model.l2_reg <= 0:
        raise ValueError("the convergence diagnostic needs the logistic model with l2_reg > 0")
    env = build_environment(cfg)
    pooled = Dataset.concat(env.shards)
    mu, lam = estimate_convexity_constants(env.model, pooled, env.root.child("convexity"))
    alpha = client_lr if client_lr is not None else 1.0 / lam
    cfg = cfg.with_values(**{"train.lr": alpha})
    theta_star = solve_optimum(env.model, env.shards)
    q = contraction_factor(mu, lam)

    dist, _ = _distances(cfg, theta_star)
    clean_dist, _ = _distances(cfg.with_values(**{"attack.kind": "none"}), theta_star)
    ref = cfg.with_values(**{"attack.kind": "none", "aggregator.rule": "fedavg"})
    _, gaps = _distances(ref, theta_star, gd_lr=alpha * cfg.experiment.global_lr)
    return ConvergenceReport(
        mu=mu,
        lam=lam,
        q=q,
        distances=dist,
        floor=fit_contraction_floor(dist, q),
        clean_floor=fit_contraction_floor(clean_dist, q),
        noise_floor=float(max(gaps)) if gaps else 0.0,
        bounded=bool(np.all(np.isfinite(dist)) and dist.max() <= 1e6 * max(1.0, dist[0])),
    )
