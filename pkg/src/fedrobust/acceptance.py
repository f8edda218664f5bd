"""Acceptance battery.

Each ``criterion_*`` function runs one exit check at its fixed tolerance and
returns a :class:`CriterionResult`. Oracles here are deliberately naive
pure-Python loops so they share no code path with the vectorised rules.
"""

from __future__ import annotations

import functools
import math
import random
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fedrobust import aggregators as agg
from fedrobust import attacks
from fedrobust.core import RngStream
from fedrobust.harness.config import ExperimentConfig
from fedrobust.harness.engine import final_metrics, run_experiment
from fedrobust.harness.results import emit_results
from fedrobust.models import QuadraticSurrogate, estimate_convexity_constants
from fedrobust.harness.diagnostics import contraction_factor, global_objective, solve_optimum

SEEDS = (0, 1, 2, 3, 4)
SWEEP_SEEDS = (0, 1, 2)


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: str
    elapsed: float
    budget: float | None = None

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        budget = f" (budget {self.budget:.0f}s)" if self.budget else ""
        return f"[{status}] criterion {self.number}: {self.name} | {self.detail} | {self.elapsed:.1f}s{budget}"


def _timed(number: int, name: str, budget: float | None):
    def wrap(fn):
        @functools.wraps(fn)
        def inner(*args, **kwargs):
            start = time.perf_counter()
            passed, detail = fn(*args, **kwargs)
            elapsed = time.perf_counter() - start
            if budget is not None and elapsed > budget:
                passed = False
                detail += f"; exceeded runtime budget {budget:.0f}s"
            return CriterionResult(number, name, bool(passed), detail, elapsed, budget)

        return inner

    return wrap


# ---------------------------------------------------------------- oracles


def oracle_trimmed_mean(rows, c):
    d = len(rows[0])
    out = []
    for k in range(d):
        col = sorted(r[k] for r in rows)
        kept = col[c : len(col) - c]
        out.append(math.fsum(kept) / len(kept))
    return out


def oracle_median(rows):
    out = []
    for k in range(len(rows[0])):
        col = sorted(r[k] for r in rows)
        n = len(col)
        out.append(col[n // 2] if n % 2 else (col[n // 2 - 1] + col[n // 2]) / 2)
    return out


def oracle_krum_index(rows, f):
    n = len(rows)
    best, best_score = None, None
    for i in range(n):
        dists = sorted(sum((a - b) ** 2 for a, b in zip(rows[i], rows[j])) for j in range(n) if j != i)
        score = sum(dists[: n - f - 2])
        if best_score is None or score < best_score:
            best, best_score = i, score
    return best


def oracle_extremes(rows):
    d = len(rows[0])
    hi = [max(r[k] for r in rows) for k in range(d)]
    lo = [min(r[k] for r in rows) for k in range(d)]
    return hi, lo


def oracle_scores(rows):
    hi, lo = oracle_extremes(rows)
    scores = []
    for r in rows:
        a = math.sqrt(sum((x - y) ** 2 for x, y in zip(r, hi)))
        b = math.sqrt(sum((x - y) ** 2 for x, y in zip(r, lo)))
        scores.append(min(a, b))
    best = 0
    for i, s in enumerate(scores):
        if s > scores[best]:
            best = i
    return scores, best


def _close(a, b, tol=1e-12) -> bool:
    return all(abs(x - y) <= tol * max(1.0, abs(y)) for x, y in zip(a, b))


def _random_instance(rnd: random.Random):
    n = rnd.randint(3, 25)
    d = rnd.randint(1, 8)
    rows = [[rnd.gauss(0, 1) * rnd.choice((1, 10)) for _ in range(d)] for _ in range(n)]
    return rows


# ---------------------------------------------------------------- criteria


@_timed(1, "aggregator oracle equivalence", 10)
def criterion_1(instances: int = 1000):
    rnd = random.Random(1)
    failures = {"trimmed_mean": 0, "median": 0, "krum": 0, "extremes": 0, "scores": 0}
    for _ in range(instances):
        rows = _random_instance(rnd)
        n = len(rows)
        c = rnd.randint(0, (n - 1) // 2)
        if not _close(agg.trimmed_mean(rows, c), oracle_trimmed_mean(rows, c)):
            failures["trimmed_mean"] += 1
        if not _close(agg.coordinate_median(rows), oracle_median(rows)):
            failures["median"] += 1
        if n >= 3:
            f = rnd.randint(0, n - 3)
            if agg.krum(rows, f).tolist() != rows[oracle_krum_index(rows, f)]:
                failures["krum"] += 1
        hi, lo = agg.extreme_vectors(rows)
        ohi, olo = oracle_extremes(rows)
        if hi.tolist() != ohi or lo.tolist() != olo:
            failures["extremes"] += 1
        table = agg.closeness_scores(rows)
        oscores, obest = oracle_scores(rows)
        if not _close(table.scores, oscores) or table.selected != obest:
            failures["scores"] += 1
    bad = {k: v for k, v in failures.items() if v}
    return not bad, f"{instances} instances per rule, mismatches: {bad or 'none'}"


@_timed(2, "synthetic-augmentation identity and worked example", 5)
def criterion_2(instances: int = 1000):
    rnd = random.Random(2)
    mismatches = 0
    for i in range(instances):
        rows = _random_instance(rnd)
        n = len(rows)
        if i % 2:
            spec = agg.AggregatorSpec("foundation_trim", trim_c=rnd.randint(0, (n - 1) // 2), synthetic_m=0)
            base = agg.trimmed_mean(rows, spec.trim_c)
        else:
            spec = agg.AggregatorSpec("foundation_median", synthetic_m=0)
            base = agg.coordinate_median(rows)
        out, _ = agg.foundation_aggregate(rows, spec)
        if not np.array_equal(out, base):
            mismatches += 1
    example = [[1.0], [2.0], [10.0]]
    trim, _ = agg.foundation_aggregate(example, agg.AggregatorSpec("foundation_trim", trim_c=1, synthetic_m=2))
    med, _ = agg.foundation_aggregate(example, agg.AggregatorSpec("foundation_median", synthetic_m=2))
    ok = mismatches == 0 and trim[0] == 2.0 and med[0] == 2.0
    return ok, f"m=0 mismatches {mismatches}/{instances}; worked example trim={trim[0]}, median={med[0]} (expect 2.0)"


def standard_config(**overrides) -> ExperimentConfig:
    """The fixed desk-scale acceptance task with dotted-key overrides."""
    return ExperimentConfig().with_values(**overrides)


@functools.lru_cache(maxsize=None)
def _run(cfg: ExperimentConfig):
    return tuple(run_experiment(cfg))


def _final_error(rule: str, attack: str, seed: int, **extra) -> float:
    cfg = standard_config(**{"aggregator.rule": rule, "attack.kind": attack, "experiment.seed": seed, **extra})
    return _run(cfg)[-1].test_error


def _mean_error(rule, attack, seeds=SEEDS, **extra) -> float:
    return float(np.mean([_final_error(rule, attack, s, **extra) for s in seeds]))


@_timed(3, "no-attack parity", 180)
def criterion_3():
    base = _mean_error("fedavg", "none")
    trim = _mean_error("foundation_trim", "none")
    med = _mean_error("foundation_median", "none")
    ok = abs(trim - base) <= 0.02 and abs(med - base) <= 0.02
    return ok, f"fedavg={base:.4f} foundation_trim={trim:.4f} foundation_median={med:.4f} (tol 0.02)"


@_timed(4, "robustness separation", 300)
def criterion_4():
    clean = _mean_error("fedavg", "none")
    f_trim = _mean_error("foundation_trim", "trim_attack")
    t_trim = _mean_error("trim_mean", "trim_attack")
    f_gauss = _mean_error("foundation_trim", "gaussian")
    a_gauss = _mean_error("fedavg", "gaussian")
    checks = {
        "trim: foundation <= clean+0.05": f_trim <= clean + 0.05,
        "trim: trim_mean >= foundation+0.05": t_trim >= f_trim + 0.05,
        "gaussian: foundation <= clean+0.05": f_gauss <= clean + 0.05,
        "gaussian: fedavg >= foundation+0.05": a_gauss >= f_gauss + 0.05,
    }
    failed = [k for k, v in checks.items() if not v]
    detail = (
        f"clean={clean:.4f}; trim attack: foundation_trim={f_trim:.4f} trim_mean={t_trim:.4f}; "
        f"gaussian: foundation_trim={f_gauss:.4f} fedavg={a_gauss:.4f}; failed: {failed or 'none'}"
    )
    return not failed, detail


@_timed(5, "variance reduction under trim attack", None)
def criterion_5():
    raw, aug, hits = [], [], []
    for s in SEEDS:
        cfg = standard_config(**{"aggregator.rule": "foundation_trim", "attack.kind": "trim_attack", "experiment.seed": s})
        recs = _run(cfg)
        m = final_metrics(list(recs))
        raw.append(m["mean_raw_variance"])
        aug.append(m["mean_augmented_variance"])
        hits.append(np.mean([r.selected_client in r.malicious_participants for r in recs]))
    ratio = float(np.mean(aug) / np.mean(raw))
    return ratio <= 0.5, (
        f"augmented/raw variance = {ratio:.3f} (need <= 0.5; appending m={standard_config().aggregator.synthetic_m} "
        f"copies to n={standard_config().partition.n_clients} bounds it below n/(n+m)); "
        f"selected update malicious in {np.mean(hits):.0%} of rounds"
    )


@_timed(6, "gradient-step contraction", 10)
def criterion_6(starts: int = 100):
    rng = np.random.default_rng(6)
    # quadratic surrogate: mu = lambda, alpha = 1 / lambda
    worst_quad = 0.0
    quad_ok = True
    for _ in range(starts):
        center = rng.standard_normal(12)
        curv = float(rng.uniform(0.5, 5.0))
        surrogate = QuadraticSurrogate(center, curv)
        mu, lam = surrogate.convexity_constants()
        q = contraction_factor(mu, lam)
        theta = rng.standard_normal(12) * 5
        _, grad = surrogate.loss_and_gradient(theta)
        lhs = np.linalg.norm(theta - grad / lam - surrogate.minimizer)
        rhs = q * np.linalg.norm(theta - surrogate.minimizer)
        quad_ok &= bool(lhs <= rhs)
        worst_quad = max(worst_quad, lhs - rhs)

    # regularised logistic on a small non-IID federation, estimated constants
    from fedrobust.harness.engine import build_environment
    from fedrobust.datagen import Dataset

    cfg = standard_config()
    env = build_environment(cfg)
    mu, lam = estimate_convexity_constants(env.model, Dataset.concat(env.shards), env.root.child("convexity"))
    q = contraction_factor(mu, lam)
    theta_star = solve_optimum(env.model, env.shards)
    f, _ = global_objective(env.model, env.shards)
    worst = -np.inf
    for _ in range(starts):
        theta = rng.standard_normal(env.model.dim)
        _, grad = f(theta)
        lhs = np.linalg.norm(theta - grad / lam - theta_star)
        rhs = q * np.linalg.norm(theta - theta_star)
        worst = max(worst, lhs - rhs)
    ok = quad_ok and worst <= 1e-6
    return ok, f"quadratic worst excess {worst_quad:.2e} (exact); logistic mu={mu:.3g} lambda={lam:.3g} worst excess {worst:.2e} (tol 1e-6)"


@_timed(7, "attack samplers", 20)
def criterion_7(instances: int = 100):
    draws = np.asarray(attacks.gaussian_attack(100_000, 1, RngStream(7, "gaussian")))[0]
    var = float(draws.var(ddof=1))
    var_ok = 197.0 <= var <= 203.0
    rng = np.random.default_rng(7)
    bad = 0
    for _ in range(instances):
        n, d = int(rng.integers(2, 16)), int(rng.integers(1, 9))
        G = rng.standard_normal((n, d)) * rng.uniform(0.1, 3.0) + rng.standard_normal(d)
        for fn, objective in ((attacks.min_max_attack, attacks.min_max_objective), (attacks.min_sum_attack, attacks.min_sum_objective)):
            _, gamma = fn(G, 1, return_gamma=True)
            p = attacks.perturbation_direction(G)
            mu = G.mean(axis=0)
            val, bound = objective(G, mu + gamma * p)
            val_up, _ = objective(G, mu + 1.01 * gamma * p)
            if not (val <= bound + 1e-9 and val_up > bound):
                bad += 1
    ok = var_ok and bad == 0
    return ok, f"gaussian sample variance {var:.2f} (need [197, 203]); min-max/min-sum infeasibility failures {bad}/{instances}"


@_timed(8, "malicious-fraction sweep", 600)
def criterion_8():
    n = standard_config().partition.n_clients
    clean = _mean_error("fedavg", "none", SWEEP_SEEDS)
    parts, ok = [], True
    for frac in (0.1, 0.2, 0.3, 0.4):
        f = int(round(frac * n))
        err = _mean_error(
            "foundation_trim",
            "trim_attack",
            SWEEP_SEEDS,
            **{"attack.n_malicious": f, "aggregator.trim_c": f, "aggregator.assumed_f": f},
        )
        ok &= err <= clean + 0.07
        parts.append(f"f/n={frac}: {err:.4f}")
    return ok, f"clean={clean:.4f}; " + ", ".join(parts) + " (need <= clean + 0.07)"


@_timed(9, "determinism", None)
def criterion_9():
    cfg = standard_config(**{"aggregator.rule": "foundation_trim", "attack.kind": "trim_attack", "experiment.seed": 9})
    blobs = []
    with tempfile.TemporaryDirectory() as tmp:
        for k in range(2):
            path = Path(tmp) / f"run{k}.csv"
            emit_results(run_experiment(cfg), path, cfg.to_dict())
            blobs.append(path.read_bytes() + path.with_suffix(".json").read_bytes())
    return blobs[0] == blobs[1], f"two runs with seed 9 produced {'identical' if blobs[0] == blobs[1] else 'different'} CSV/JSON bytes"


CRITERIA = (criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7, criterion_8, criterion_9)
QUICK = (criterion_1, criterion_2, criterion_6, criterion_7)


def run_battery(quick: bool = False, echo=print) -> list[CriterionResult]:
    results = []
    for fn in QUICK if quick else CRITERIA:
        res = fn()
        echo(res.line())
        results.append(res)
    return results
