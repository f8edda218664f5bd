"""The training loop: synchronise, train locally, attack, aggregate, step."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fedrobust import attacks
from fedrobust.aggregators import aggregate
from fedrobust.core import RngStream, RoundContext, apply_global_update
from fedrobust.datagen import (
    Dataset,
    DatasetShard,
    PartitionConfig,
    backdoor_testset,
    flip_labels,
    generate_synthetic_classification,
    partition_non_iid,
    train_test_split,
)
from fedrobust.harness.config import ExperimentConfig
from fedrobust.models import (
    LocalTrainConfig,
    ModelSpec,
    evaluate_attack_success,
    evaluate_error_rate,
    local_update,
)


class RoundError(RuntimeError):
    """A round failed; the message names the round, phase and client when known."""


@dataclass
class RoundRecord:
    round: int
    selected_client: int
    update_norm: float
    raw_variance_mean: float
    augmented_variance_mean: float
    test_error: float | None = None
    attack_success: float | None = None
    participants: tuple[int, ...] = ()
    malicious_participants: tuple[int, ...] = ()
    trim_c: int = 0

    @property
    def evaluated(self) -> bool:
        return self.test_error is not None


@dataclass
class Environment:
    """Everything fixed for the whole run: data, shards, model and attacker setup."""

    cfg: ExperimentConfig
    root: RngStream
    model: ModelSpec
    train: LocalTrainConfig
    shards: list[DatasetShard]
    testset: Dataset
    malicious_ids: frozenset
    attack: attacks.AttackSpec
    trigger: attacks.TriggerSpec
    backdoor_test: Dataset | None = None
    theta_fake: np.ndarray | None = None
    poisoned_shards: dict = field(default_factory=dict)

    @property
    def n_clients(self) -> int:
        return len(self.shards)


@dataclass
class FLState:
    theta: np.ndarray
    round: int = 0


def _parse_indices(text: str) -> tuple[int, ...]:
    text = text.strip()
    return tuple(int(t) for t in text.split(",") if t.strip()) if text else ()


def build_environment(cfg: ExperimentConfig) -> Environment:
    root = RngStream(cfg.experiment.seed, "fl")
    dc, pc = cfg.data, cfg.partition
    data = generate_synthetic_classification(dc.n_examples, dc.n_classes, dc.n_features, dc.separation, root.child("data"))
    train, test = train_test_split(data, dc.test_fraction, root.child("split"))
    shards = partition_non_iid(train, PartitionConfig(pc.n_clients, dc.n_classes, pc.bias, root.child("partition")))
    model = ModelSpec(cfg.model.kind, dc.n_features, dc.n_classes, cfg.model.hidden_width, cfg.model.l2_reg)
    tc = cfg.train
    train_cfg = LocalTrainConfig(tc.epochs, tc.batch_size, tc.lr)

    ac = cfg.attack
    if ac.kind == "none":
        malicious = frozenset()
    else:
        picks = root.child("malicious").generator().choice(pc.n_clients, size=ac.n_malicious, replace=False)
        malicious = frozenset(int(i) for i in picks)
    spec = attacks.AttackSpec(ac.kind, malicious, dict(vars(ac)))
    spec.validate(pc.n_clients)
    trigger = attacks.TriggerSpec(_parse_indices(ac.trigger_indices), ac.trigger_value, ac.target_label)

    env = Environment(cfg, root, model, train_cfg, shards, test, malicious, spec, trigger)
    if ac.kind == "scaling":
        env.backdoor_test = backdoor_testset(test, trigger.indices, trigger.value, trigger.target_label)
    if ac.kind == "label_flip":
        env.poisoned_shards = {i: flip_labels(shards[i], dc.n_classes) for i in malicious}
    if ac.kind == "mpaf":
        env.theta_fake = root.child("mpaf_fake").generator().standard_normal(model.dim)
    return env


def initial_state(env: Environment) -> FLState:
    return FLState(theta=env.model.init_params(env.root.child("init")))


def sample_participants(env: Environment, t: int) -> list[int]:
    k = env.cfg.participants_per_round
    n = env.n_clients
    if k >= n:
        return list(range(n))
    picks = env.root.child("participation", t).generator().choice(n, size=k, replace=False)
    return sorted(int(i) for i in picks)


def is_eval_round(t: int, cfg: ExperimentConfig) -> bool:
    return (t + 1) % cfg.experiment.eval_every == 0 or t == cfg.experiment.rounds - 1


def client_updates(env: Environment, state: FLState, participants: list[int]) -> np.ndarray:
    """Updates of all participants in client-id order, attacks applied."""
    t = state.round
    mal = [i for i in participants if i in env.malicious_ids]
    benign = [i for i in participants if i not in env.malicious_ids]
    updates: dict[int, np.ndarray] = {}

    def train(i, shard):
        try:
            return local_update(env.model, state.theta, shard, env.train, env.root.child("train", t, i), client_id=i)
        except Exception as exc:
            raise RoundError(f"round {t}, phase local_update, client {i}: {exc}") from exc

    for i in benign:
        updates[i] = train(i, env.shards[i])
    if mal:
        try:
            forged = _malicious_updates(env, state, mal, [updates[i] for i in benign], len(participants), train)
        except RoundError:
            raise
        except Exception as exc:
            raise RoundError(f"round {t}, phase attack ({env.attack.kind}): {exc}") from exc
        updates.update(zip(mal, forged))
    return np.vstack([updates[i] for i in participants])


def _malicious_updates(env, state, mal, benign_updates, n_participants, train):
    t = state.round
    kind = env.attack.kind
    ac = env.cfg.attack
    rng = env.root.child("attack", t)
    f = len(mal)
    if kind == "label_flip":
        return [train(i, env.poisoned_shards[i]) for i in mal]
    if kind == "scaling":
        scale = ac.scale_factor or env.n_clients / len(env.malicious_ids)
        return [
            attacks.scaling_attack(
                env.model, state.theta, env.shards[i], env.trigger, scale, env.train, env.root.child("train", t, i), i
            )
            for i in mal
        ]
    if kind == "gaussian":
        return attacks.gaussian_attack(env.model.dim, f, rng, ac.gaussian_variance)
    if kind == "mpaf":
        return attacks.mpaf_attack(state.theta, env.theta_fake, f, ac.mpaf_magnitude)
    if kind == "trim_attack":
        return attacks.trim_attack(benign_updates, f, rng, ac.trim_lo, ac.trim_hi)
    if kind == "krum_attack":
        assumed = env.cfg.aggregator.assumed_f
        assumed = min(assumed, n_participants - 3)
        return attacks.krum_attack(benign_updates, f, assumed, rng)
    if kind == "min_max":
        return attacks.min_max_attack(benign_updates, f, ac.perturbation, rng)
    if kind == "min_sum":
        return attacks.min_sum_attack(benign_updates, f, ac.perturbation, rng)
    if kind == "adaptive_i":
        z = ac.adaptive_z or None
        return attacks.adaptive_i_attack(benign_updates, f, z, rng, n_total=n_participants)
    raise ValueError(f"unsupported attack {kind!r}")


def run_round(env: Environment, state: FLState) -> tuple[FLState, RoundRecord]:
    cfg = env.cfg
    t = state.round
    participants = sample_participants(env, t)
    G = client_updates(env, state, participants)
    try:
        g_hat, info = aggregate(G, cfg.aggregator_spec, env.root.child("aggregate", t))
    except Exception as exc:
        raise RoundError(f"round {t}, phase aggregate: {exc}") from exc
    ctx = RoundContext(t, cfg.experiment.global_lr, max(cfg.train.lr, 1e-300))
    try:
        theta = apply_global_update(state.theta, g_hat, ctx)
    except Exception as exc:
        raise RoundError(f"round {t}, phase global_update: {exc}") from exc

    selected = info["selected"]
    record = RoundRecord(
        round=t,
        selected_client=participants[selected] if selected >= 0 else -1,
        update_norm=float(np.linalg.norm(g_hat)),
        raw_variance_mean=float(G.var(axis=0).mean()),
        augmented_variance_mean=float(info["augmented"].var(axis=0).mean()),
        participants=tuple(participants),
        malicious_participants=tuple(i for i in participants if i in env.malicious_ids),
        trim_c=int(info["trim_c"]),
    )
    if is_eval_round(t, cfg):
        record.test_error = evaluate_error_rate(env.model, theta, env.testset)
        if env.backdoor_test is not None:
            record.attack_success = evaluate_attack_success(env.model, theta, env.backdoor_test, env.trigger.target_label)
    return FLState(theta, t + 1), record


def run_experiment(cfg: ExperimentConfig, return_state: bool = False):
    env = build_environment(cfg)
    state = initial_state(env)
    records = []
    for _ in range(cfg.experiment.rounds):
        state, rec = run_round(env, state)
        records.append(rec)
    return (records, state) if return_state else records


def final_metrics(records: list[RoundRecord]) -> dict:
    if not records:
        return {}
    last = records[-1]
    evaluated = [r for r in records if r.evaluated]
    return {
        "rounds": len(records),
        "final_test_error": last.test_error,
        "final_attack_success": last.attack_success,
        "mean_raw_variance": float(np.mean([r.raw_variance_mean for r in records])),
        "mean_augmented_variance": float(np.mean([r.augmented_variance_mean for r in records])),
        "evaluated_rounds": len(evaluated),
    }
