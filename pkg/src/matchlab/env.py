"""The online matching MDP: episode state, legality, transitions, rewards.

One episode walks an instance's arrival stream; at each step the policy picks
a fixed node or the skip slot (index u_count). Transitions are deterministic.
Rewards: edge weight (plain matching), marginal coverage gain (coverage
objective), or budget actually depleted min(bid, remaining) (budgeted).

The value of matching u at the current arrival ("action value") is the reward
that match would earn right now; it is the single currency used for rewards,
greedy-style baselines, and feature statistics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .features import FeatureState
from .graph_core import (
    AdwordsPayload,
    Arrival,
    BipartiteInstance,
    EobmPayload,
    OsbmPayload,
    ProblemPayload,
    Solution,
)


class IllegalActionError(RuntimeError):
    pass


@dataclass
class EobmState:
    pass


@dataclass
class OsbmState:
    covered: dict[int, np.ndarray]  # user id -> bool[genre_count]


@dataclass
class AdwordsState:
    remaining: np.ndarray


@dataclass
class StepRecord:
    """One decision with everything needed to recompute its probability."""

    action: int
    log_prob: float
    entropy: float
    inputs: np.ndarray | None = None
    mask: np.ndarray | None = None


@dataclass
class EpisodeState:
    u_count: int
    horizon: int
    payload: ProblemPayload
    t: int
    available: np.ndarray
    matched_pairs: list[tuple[int, int]]
    cumulative_reward: float
    problem_state: EobmState | OsbmState | AdwordsState
    features: FeatureState
    _staged_t: int = field(default=-1, repr=False)

    @property
    def terminal(self) -> bool:
        return self.t >= self.horizon


def osbm_arrays(payload: OsbmPayload):
    """Genre-index arrays per fixed node and weight arrays per user, cached on the payload."""
    cache = getattr(payload, "_arrays", None)
    if cache is None:
        genre_idx = tuple(
            np.array(sorted(s), dtype=np.int64) for s in payload.genres_per_u
        )
        user_w = {l: np.asarray(v, dtype=np.float64) for l, v in payload.user_weights.items()}
        cache = (genre_idx, user_w)
        object.__setattr__(payload, "_arrays", cache)
    return cache


def reset(instance: BipartiteInstance) -> EpisodeState:
    payload = instance.payload
    if isinstance(payload, AdwordsPayload):
        problem_state: EobmState | OsbmState | AdwordsState = AdwordsState(
            remaining=np.array(payload.budgets, dtype=np.float64)
        )
    elif isinstance(payload, OsbmPayload):
        problem_state = OsbmState(covered={})
    else:
        problem_state = EobmState()
    return EpisodeState(
        u_count=instance.u_count,
        horizon=instance.horizon,
        payload=payload,
        t=0,
        available=np.ones(instance.u_count, dtype=bool),
        matched_pairs=[],
        cumulative_reward=0.0,
        problem_state=problem_state,
        features=FeatureState(instance.u_count, instance.horizon),
    )


def action_values(state: EpisodeState, arrival: Arrival) -> np.ndarray:
    """Value of matching each fixed node right now; 0 where no edge exists."""
    vals = np.zeros(state.u_count)
    payload = state.payload
    if isinstance(payload, EobmPayload):
        vals[arrival.u_idx] = arrival.weights
    elif isinstance(payload, OsbmPayload):
        genre_idx, user_w = osbm_arrays(payload)
        wl = user_w[arrival.user_id]
        covered = state.problem_state.covered.get(arrival.user_id)
        for u in arrival.u_idx:
            idx = genre_idx[u]
            if covered is None:
                vals[u] = wl[idx].sum()
            else:
                vals[u] = wl[idx[~covered[idx]]].sum()
    else:
        vals[arrival.u_idx] = np.minimum(
            arrival.weights, state.problem_state.remaining[arrival.u_idx]
        )
    return vals


def begin_arrival(state: EpisodeState, arrival: Arrival) -> None:
    """Stage the arrival's edges/values into the feature accumulators (idempotent)."""
    if state._staged_t == state.t:
        return
    if state.terminal:
        raise IllegalActionError("episode is terminal")
    state.features.observe(arrival.u_idx, action_values(state, arrival)[arrival.u_idx])
    state._staged_t = state.t


def legal_mask(state: EpisodeState, arrival: Arrival) -> np.ndarray:
    """Boolean vector over u_count+1 slots; the skip slot (last) is always legal."""
    mask = np.zeros(state.u_count + 1, dtype=bool)
    mask[arrival.u_idx] = state.available[arrival.u_idx]
    mask[state.u_count] = True
    return mask


def step(state: EpisodeState, arrival: Arrival, action: int) -> float:
    """Apply one decision; returns the reward. Illegal actions raise."""
    begin_arrival(state, arrival)
    n = state.u_count
    if not (0 <= action <= n):
        raise IllegalActionError(f"action {action} out of range (skip index is {n})")
    if action == n:
        reward = 0.0
    else:
        pos = np.searchsorted(arrival.u_idx, action)
        if pos >= len(arrival.u_idx) or arrival.u_idx[pos] != action:
            raise IllegalActionError(f"t={state.t}: no edge to fixed node {action}")
        if not state.available[action]:
            raise IllegalActionError(f"t={state.t}: fixed node {action} is unavailable")
        reward = float(state.features.staged_vals[pos])
        payload = state.payload
        if isinstance(payload, EobmPayload):
            state.available[action] = False
        elif isinstance(payload, OsbmPayload):
            genre_idx, _ = osbm_arrays(payload)
            cov = state.problem_state.covered.get(arrival.user_id)
            if cov is None:
                cov = np.zeros(payload.genre_count, dtype=bool)
                state.problem_state.covered[arrival.user_id] = cov
            cov[genre_idx[action]] = True
            state.available[action] = False
        else:
            rem = state.problem_state.remaining
            rem[action] -= reward
            if rem[action] <= 0.0:
                rem[action] = 0.0
                state.available[action] = False
        state.matched_pairs.append((state.t, action))
    state.features.commit(action, reward)
    state.cumulative_reward += reward
    state.t += 1
    return reward


def rollout(
    instance: BipartiteInstance,
    policy,
    mode: str | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[Solution, list[StepRecord]]:
    """Play one full episode; returns the solution and the per-step trajectory.

    The policy object must provide begin_episode(instance, rng) -> ctx and
    act(state, arrival, rng, mode, ctx) -> StepRecord.
    """
    state = reset(instance)
    ctx = policy.begin_episode(instance, rng)
    records: list[StepRecord] = []
    decisions: list[int | None] = []
    n = instance.u_count
    for arrival in instance.arrivals:
        begin_arrival(state, arrival)
        rec = policy.act(state, arrival, rng=rng, mode=mode, ctx=ctx)
        step(state, arrival, rec.action)
        records.append(rec)
        decisions.append(None if rec.action == n else rec.action)
    return Solution(tuple(decisions), state.cumulative_reward), records


def replay(instance: BipartiteInstance, decisions) -> float:
    """Drive the environment with a fixed decision sequence; returns the objective."""
    state = reset(instance)
    n = instance.u_count
    for arrival, d in zip(instance.arrivals, decisions):
        action = n if d is None else int(d)
        step(state, arrival, action)
    return state.cumulative_reward
