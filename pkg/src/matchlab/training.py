"""Policy-gradient and behavior-cloning training loops.

REINFORCE uses the whole-episode advantage (episode cost minus an exponential
moving average baseline over batch-mean costs) times the summed step
log-probabilities, minus an entropy bonus. Behavior cloning teacher-forces the
hindsight-optimal trajectory and minimizes weighted cross-entropy where the
skip class weighs u_count/horizon.

Gradients are recomputed from stored step inputs in fixed chunk order, so a
training run is a pure function of (dataset, config, seed).
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import env, evaluation, features, nn, offline, policies
from .graph_core import BipartiteInstance
from .serialize import fmt_float

GRAD_CHUNK_STEPS = 512


class DataError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 300
    dataset_size: int = 20000  # informational; the dataset file governs
    batch_size: int = 200
    learning_rate: float = 1e-3
    lr_decay: float = 0.98
    ema_beta: float = 0.8
    entropy_rate: float = 1e-3
    seed: int = 0
    eval_every: int = 0  # 0: only after the final epoch
    val_size: int = 1000  # informational

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not (0.0 <= self.ema_beta <= 1.0):
            raise ValueError("ema_beta must be in [0, 1]")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class BaselineState:
    value: float = 0.0
    initialized: bool = False


def update_baseline(state: BaselineState, mean_cost: float, beta: float) -> None:
    """EMA over batch-mean costs; the first batch ever sets the value outright."""
    if not state.initialized:
        state.value = mean_cost
        state.initialized = True
    else:
        state.value = beta * state.value + (1.0 - beta) * mean_cost


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2, epoch)))


def _chunks(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i : i + size]


def _stack_inputs(policy: policies.PolicyModel, inputs: list[np.ndarray]) -> np.ndarray:
    if policy.invariant:
        return np.concatenate(inputs, axis=0)
    return np.stack(inputs)


def sample_batch_rollouts(
    policy: policies.PolicyModel,
    instances: list[BipartiteInstance],
    rng: np.random.Generator,
) -> tuple[np.ndarray, list[list[env.StepRecord]]]:
    """Sample one episode per instance, stepping all episodes in lockstep so the
    per-step policy forward is one batched call. Instances share a horizon."""
    horizons = {inst.horizon for inst in instances}
    if len(horizons) != 1:
        raise DataError(f"batch mixes horizons {sorted(horizons)}")
    horizon = horizons.pop()
    n = len(instances)
    states = [env.reset(inst) for inst in instances]
    records: list[list[env.StepRecord]] = [[] for _ in range(n)]
    for t in range(horizon):
        inputs = []
        masks = []
        for state, inst in zip(states, instances):
            arrival = inst.arrivals[t]
            env.begin_arrival(state, arrival)
            inputs.append(
                features.assemble_input(policy.kind, state, arrival, state.payload)
            )
            masks.append(env.legal_mask(state, arrival))
        mask_matrix = np.stack(masks)
        out, _ = nn.forward(policy.params, _stack_inputs(policy, inputs))
        logits = out[:, 0].reshape(n, -1) if policy.invariant else out
        probs = nn.masked_softmax_rows(logits, mask_matrix)
        logp = np.where(probs > 0, np.log(np.where(probs > 0, probs, 1.0)), 0.0)
        entropies = -(probs * logp).sum(axis=1)
        draws = rng.random(n)
        cdf = np.cumsum(probs, axis=1)
        for i, (state, inst) in enumerate(zip(states, instances)):
            a = int(np.searchsorted(cdf[i], draws[i], side="right"))
            if a > inst.u_count:
                a = int(np.flatnonzero(probs[i] > 0)[-1])
            env.step(state, inst.arrivals[t], a)
            records[i].append(
                env.StepRecord(a, float(logp[i, a]), float(entropies[i]), inputs[i], masks[i])
            )
    rewards = np.array([s.cumulative_reward for s in states])
    return rewards, records


def reinforce_surrogate(
    policy: policies.PolicyModel,
    trajectories: list[list[env.StepRecord]],
    advantages: np.ndarray,
    entropy_rate: float,
    with_grads: bool = True,
):
    """Mean over instances of adv * sum_t log p(a_t) - entropy_rate * sum_t H_t,
    recomputed from the stored step inputs; optionally its exact gradient."""
    n_inst = len(trajectories)
    flat = [
        (rec, float(adv)) for traj, adv in zip(trajectories, advantages) for rec in traj
    ]
    loss = 0.0
    grads = None
    for chunk in _chunks(flat, GRAD_CHUNK_STEPS):
        records = [rec for rec, _ in chunk]
        adv = np.array([a for _, a in chunk])
        masks = np.stack([rec.mask for rec in records])
        actions = np.array([rec.action for rec in records])
        n_steps, n_slots = masks.shape
        x = _stack_inputs(policy, [rec.inputs for rec in records])
        out, tape = nn.forward(policy.params, x)
        logits = out[:, 0].reshape(n_steps, n_slots) if policy.invariant else out
        probs = nn.masked_softmax_rows(logits, masks)
        logp = np.where(probs > 0, np.log(np.where(probs > 0, probs, 1.0)), 0.0)
        ent = -(probs * logp).sum(axis=1)
        rows = np.arange(n_steps)
        loss += float((adv * logp[rows, actions] - entropy_rate * ent).sum()) / n_inst
        if with_grads:
            dlogits = -probs * adv[:, None]
            dlogits[rows, actions] += adv
            dlogits += entropy_rate * probs * (logp + ent[:, None])
            dlogits /= n_inst
            dlogits = np.where(masks, dlogits, 0.0)
            dout = dlogits.reshape(-1, 1) if policy.invariant else dlogits
            grads = nn.accumulate_grads(grads, nn.backward(policy.params, tape, dout))
    return loss, grads


def reinforce_epoch(
    policy: policies.PolicyModel,
    instances: list[BipartiteInstance],
    config: TrainConfig,
    baseline: BaselineState,
    adam: nn.AdamState,
    rng: np.random.Generator,
    epoch: int = 0,
) -> list[dict]:
    """One pass over the dataset in shuffled batches; returns per-batch stats."""
    order = rng.permutation(len(instances))
    stats = []
    for b, batch_idx in enumerate(_chunks(order, config.batch_size)):
        batch = [instances[int(i)] for i in batch_idx]
        rewards, trajectories = sample_batch_rollouts(policy, batch, rng)
        entropies = [rec.entropy for traj in trajectories for rec in traj]
        costs = -np.array(rewards)
        mean_cost = float(costs.mean())
        if not baseline.initialized:
            update_baseline(baseline, mean_cost, config.ema_beta)  # sets b to the mean
            post_update = False
        else:
            post_update = True
        loss, grads = reinforce_surrogate(
            policy, trajectories, costs - baseline.value, config.entropy_rate
        )
        if not np.isfinite(loss):
            raise FloatingPointError(
                f"non-finite surrogate loss {loss!r} (epoch {epoch}, batch {b})"
            )
        nn.adam_step(policy.params, grads, adam)
        if post_update:
            update_baseline(baseline, mean_cost, config.ema_beta)
        stats.append(
            {
                "epoch": epoch,
                "batch": b,
                "mean_reward": float(np.mean(rewards)),
                "mean_cost": mean_cost,
                "baseline": baseline.value,
                "lr": adam.alpha,
                "entropy": float(np.mean(entropies)),
            }
        )
    adam.alpha *= config.lr_decay
    return stats


def behavior_cloning_samples(
    kind: str, instance: BipartiteInstance, targets: list[int], where: str = "instance"
) -> list[tuple[np.ndarray, np.ndarray, int]]:
    """Teacher-force the target decisions, collecting (inputs, mask, target) per step."""
    state = env.reset(instance)
    samples = []
    for t, arrival in enumerate(instance.arrivals):
        env.begin_arrival(state, arrival)
        mask = env.legal_mask(state, arrival)
        a = int(targets[t])
        if not (0 <= a < len(mask)) or not mask[a]:
            raise DataError(f"{where} timestep {t}: target action {a} is illegal")
        inputs = features.assemble_input(kind, state, arrival, instance.payload)
        samples.append((inputs, mask, a))
        env.step(state, arrival, a)
    return samples


def cross_entropy_loss(
    policy: policies.PolicyModel,
    samples: list[tuple[np.ndarray, np.ndarray, int]],
    skip_weight: float,
    with_grads: bool = True,
):
    """Weighted cross-entropy over all samples (mean over N*T); match classes
    weigh 1, the skip class skip_weight."""
    total = len(samples)
    loss = 0.0
    grads = None
    for chunk in _chunks(samples, GRAD_CHUNK_STEPS):
        masks = np.stack([m for _, m, _ in chunk])
        actions = np.array([a for _, _, a in chunk])
        n_steps, n_slots = masks.shape
        x = _stack_inputs(policy, [i for i, _, _ in chunk])
        out, tape = nn.forward(policy.params, x)
        logits = out[:, 0].reshape(n_steps, n_slots) if policy.invariant else out
        probs = nn.masked_softmax_rows(logits, masks)
        rows = np.arange(n_steps)
        weights = np.where(actions == n_slots - 1, skip_weight, 1.0)
        loss += float((-weights * np.log(probs[rows, actions])).sum()) / total
        if with_grads:
            dlogits = probs * weights[:, None]
            dlogits[rows, actions] -= weights
            dlogits /= total
            dlogits = np.where(masks, dlogits, 0.0)
            dout = dlogits.reshape(-1, 1) if policy.invariant else dlogits
            grads = nn.accumulate_grads(grads, nn.backward(policy.params, tape, dout))
    return loss, grads


def supervised_epoch(
    policy: policies.PolicyModel,
    instances: list[BipartiteInstance],
    targets: list[list[int]],
    config: TrainConfig,
    adam: nn.AdamState,
    rng: np.random.Generator,
    epoch: int = 0,
) -> list[dict]:
    order = rng.permutation(len(instances))
    skip_weight = instances[0].u_count / instances[0].horizon
    stats = []
    for b, batch_idx in enumerate(_chunks(order, config.batch_size)):
        samples = []
        for i in batch_idx:
            i = int(i)
            samples.extend(
                behavior_cloning_samples(
                    policy.kind, instances[i], targets[i], where=f"instance {i}"
                )
            )
        loss, grads = cross_entropy_loss(policy, samples, skip_weight)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite loss {loss!r} (epoch {epoch}, batch {b})")
        nn.adam_step(policy.params, grads, adam)
        stats.append(
            {
                "epoch": epoch,
                "batch": b,
                "mean_reward": "",
                "mean_cost": loss,
                "baseline": "",
                "lr": adam.alpha,
                "entropy": "",
            }
        )
    adam.alpha *= config.lr_decay
    return stats


LOG_COLUMNS = ("epoch", "batch", "mean_reward", "mean_cost", "baseline", "lr", "entropy")


def append_log(path: str, rows: list[dict]) -> None:
    new = not os.path.exists(path)
    with open(path, "a", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        if new:
            writer.writerow(LOG_COLUMNS)
        for row in rows:
            writer.writerow([_fmt_cell(row[c]) for c in LOG_COLUMNS])


def _fmt_cell(v) -> str:
    return fmt_float(v) if isinstance(v, float) else str(v)


@dataclass
class TrainResult:
    policy: policies.PolicyModel
    history: list[dict] = field(default_factory=list)
    best_ratio: float | None = None


def _checkpoint_extra(config, adam, baseline, epoch_next, best_ratio) -> dict:
    return {
        "config": asdict(config),
        "epoch_next": epoch_next,
        "best_ratio": best_ratio,
        "baseline": {"value": baseline.value, "initialized": baseline.initialized},
        "adam": {
            "alpha": adam.alpha,
            "beta1": adam.beta1,
            "beta2": adam.beta2,
            "eps": adam.eps,
            "step": adam.step,
            "m": [{"w": mw.ravel().tolist(), "b": mb.tolist()} for mw, mb in adam.m],
            "v": [{"w": vw.ravel().tolist(), "b": vb.tolist()} for vw, vb in adam.v],
        },
        "seed_lineage": {"root_seed": config.seed, "epoch_stream": "spawn_key=(2, epoch)"},
    }


def _restore_adam(extra: dict, params: nn.MlpParams) -> nn.AdamState:
    a = extra["adam"]
    adam = nn.AdamState.create(params, alpha=a["alpha"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"])
    adam.step = int(a["step"])
    for i, (w, b) in enumerate(params.layers):
        adam.m[i][0][...] = np.array(a["m"][i]["w"]).reshape(w.shape)
        adam.m[i][1][...] = np.array(a["m"][i]["b"])
        adam.v[i][0][...] = np.array(a["v"][i]["w"]).reshape(w.shape)
        adam.v[i][1][...] = np.array(a["v"][i]["b"])
    return adam


def best_checkpoint_path(checkpoint_path: str) -> str:
    root, ext = os.path.splitext(checkpoint_path)
    return f"{root}.best{ext or '.json'}"


def train(
    kind: str,
    instances: list[BipartiteInstance],
    config: TrainConfig,
    targets: list[list[int]] | None = None,
    val_instances: list[BipartiteInstance] | None = None,
    val_entries: dict[int, offline.OracleEntry] | None = None,
    checkpoint_path: str | None = None,
    log_path: str | None = None,
    resume: bool = False,
) -> TrainResult:
    """Full training protocol: epochs, periodic validation, checkpointing.

    checkpoint_path always holds the latest resumable state; when validation
    instances are given the best-validation parameters are additionally kept
    at best_checkpoint_path(checkpoint_path).
    """
    if not instances:
        raise DataError("training dataset is empty")
    first = instances[0]
    if config.batch_size > len(instances):
        raise DataError("batch_size exceeds dataset size")
    supervised = kind == "ff-supervised"
    if supervised and targets is None:
        raise DataError("ff-supervised needs hindsight targets (run solve first)")

    start_epoch = 0
    best_ratio: float | None = None
    if resume and checkpoint_path and os.path.exists(checkpoint_path):
        policy, extra = policies.load_policy(checkpoint_path)
        adam = _restore_adam(extra, policy.params)
        baseline = BaselineState(**extra["baseline"])
        start_epoch = int(extra["epoch_next"])
        best_ratio = extra.get("best_ratio")
    else:
        policy = policies.make_policy(
            kind,
            problem_kind=first.kind,
            u_count=first.u_count,
            horizon=first.horizon,
            seed=config.seed,
        )
        adam = nn.AdamState.create(policy.params, alpha=config.learning_rate)
        baseline = BaselineState()

    def save(epoch_next: int) -> None:
        if checkpoint_path:
            policies.save_policy(
                policy,
                checkpoint_path,
                extra=_checkpoint_extra(config, adam, baseline, epoch_next, best_ratio),
            )

    def validate() -> float:
        report = evaluation.evaluate(
            policy, val_instances, val_entries, dataset_hash="val", seed=config.seed
        )
        return report.mean_ratio

    history: list[dict] = []
    if start_epoch == 0:
        save(0)  # 0 epochs -> checkpoint equals initialization
    for epoch in range(start_epoch, config.epochs):
        rng = _epoch_rng(config.seed, epoch)
        if supervised:
            rows = supervised_epoch(policy, instances, targets, config, adam, rng, epoch)
        else:
            rows = reinforce_epoch(policy, instances, config, baseline, adam, rng, epoch)
        history.extend(rows)
        if log_path:
            append_log(log_path, rows)
        due = config.eval_every > 0 and (epoch + 1) % config.eval_every == 0
        last = epoch + 1 == config.epochs
        if val_instances is not None and (due or last):
            ratio = validate()
            history.append({"epoch": epoch, "val_mean_ratio": ratio})
            if best_ratio is None or ratio > best_ratio:
                best_ratio = ratio
                if checkpoint_path:
                    policies.save_policy(policy, best_checkpoint_path(checkpoint_path))
        save(epoch + 1)
    return TrainResult(policy=policy, history=history, best_ratio=best_ratio)
