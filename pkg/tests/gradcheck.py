"""Finite-difference gradient checking for the training losses.

Central differences are only valid away from the ReLU kink, so draws where any
pre-activation of the frozen batch sits within the perturbation radius are
rejected and redrawn (deterministically, by walking the seed space).
"""

from __future__ import annotations

import numpy as np

from conftest import random_eobm_instance

from matchlab import env, features, nn, offline, policies, training

FD_H = 1e-5
KINK_MARGIN = 2e-3
SMALL_HIDDEN = (10, 8)


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    worst = 0.0
    for x, y in zip(np.asarray(a).ravel(), np.asarray(b).ravel()):
        denom = max(abs(x), abs(y))
        if denom < 1e-6:
            assert abs(x - y) < 1e-10
            continue
        worst = max(worst, abs(x - y) / denom)
    return worst


def numeric_grad(loss_fn, params: nn.MlpParams, h: float = FD_H) -> np.ndarray:
    flat = nn.flatten_params(params).copy()
    grad = np.zeros_like(flat)
    for i in range(len(flat)):
        flat[i] += h
        nn.set_flat_params(params, flat)
        up = loss_fn()
        flat[i] -= 2 * h
        nn.set_flat_params(params, flat)
        down = loss_fn()
        flat[i] += h
        nn.set_flat_params(params, flat)
        grad[i] = (up - down) / (2 * h)
    return grad


def small_policy(kind: str, u_count: int, problem_kind: str, seed: int) -> policies.PolicyModel:
    """A policy with the production input assembly but a small net (FD-tractable)."""
    invariant = kind in policies.INVARIANT_KINDS
    dim = features.input_dim(kind, u_count, problem_kind)
    out_dim = 1 if invariant else u_count + 1
    return policies.PolicyModel(
        kind=kind,
        params=nn.init_params([dim, *SMALL_HIDDEN, out_dim], seed),
        problem_kind=problem_kind,
        u_count=None if invariant else u_count,
    )


def _kink_free(policy: policies.PolicyModel, inputs: list[np.ndarray]) -> bool:
    x = np.concatenate(inputs, axis=0) if policy.invariant else np.stack(inputs)
    _, tape = nn.forward(policy.params, x)
    return min(float(np.abs(z).min()) for z in tape.preacts) > KINK_MARGIN


def reinforce_draw(seed: int):
    """(policy, frozen trajectories, advantages) with all pre-activations off the kink."""
    for attempt in range(200):
        rng = np.random.default_rng((seed, attempt))
        kind = policies.NEURAL_KINDS[:4][(seed + attempt) % 4]
        policy = small_policy(kind, 3, "eobm", seed * 211 + attempt)
        instances = [random_eobm_instance(rng, u_count=3, horizon=4) for _ in range(3)]
        trajectories, costs = [], []
        for inst in instances:
            solution, records = env.rollout(inst, policy, mode=policies.SAMPLE, rng=rng)
            trajectories.append(records)
            costs.append(-solution.objective_value)
        inputs = [rec.inputs for traj in trajectories for rec in traj]
        if _kink_free(policy, inputs):
            costs = np.array(costs)
            return policy, trajectories, costs - costs.mean()
    raise AssertionError("no kink-free draw found")


def cross_entropy_draw(seed: int):
    """(policy, samples, skip_weight) with all pre-activations off the kink."""
    for attempt in range(200):
        rng = np.random.default_rng((seed, attempt))
        policy = small_policy("ff-supervised", 3, "eobm", seed * 613 + attempt)
        samples = []
        for _ in range(2):
            inst = random_eobm_instance(rng, u_count=3, horizon=5)
            targets = offline.hindsight_targets(inst, offline.solve_eobm(inst))
            samples.extend(training.behavior_cloning_samples(policy.kind, inst, targets))
        if _kink_free(policy, [s[0] for s in samples]):
            return policy, samples, 3 / 5
    raise AssertionError("no kink-free draw found")


def check_reinforce_gradient(seed: int, entropy_rate: float = 1e-2) -> float:
    policy, trajectories, adv = reinforce_draw(seed)
    _, grads = training.reinforce_surrogate(policy, trajectories, adv, entropy_rate)
    flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])

    def loss_fn():
        val, _ = training.reinforce_surrogate(
            policy, trajectories, adv, entropy_rate, with_grads=False
        )
        return val

    return rel_err(flat, numeric_grad(loss_fn, policy.params))


def check_cross_entropy_gradient(seed: int) -> float:
    policy, samples, skip_weight = cross_entropy_draw(seed)
    _, grads = training.cross_entropy_loss(policy, samples, skip_weight)
    flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])

    def loss_fn():
        val, _ = training.cross_entropy_loss(policy, samples, skip_weight, with_grads=False)
        return val

    return rel_err(flat, numeric_grad(loss_fn, policy.params))
