from __future__ import annotations

import numpy as np
import pytest

from conftest import (
    AlwaysSkipPolicy,
    RandomLegalPolicy,
    coverage_objective,
    eobm_instance,
    random_adwords_instance,
    random_eobm_instance,
    random_osbm_instance,
)

from matchlab import env
from matchlab.graph_core import (
    AdwordsPayload,
    Arrival,
    BipartiteInstance,
    OsbmPayload,
)


def osbm_two_arrivals():
    # movie 0: {drama}, movie 1: {comedy, drama}; user 0 weights (comedy 2, drama 3, action 1)
    payload = OsbmPayload(
        genre_count=3,
        genres_per_u=(frozenset({1}), frozenset({0, 1})),
        user_weights={0: (2.0, 3.0, 1.0)},
    )
    arrivals = (
        Arrival(edges=((0, 1.0),), user_id=0),
        Arrival(edges=((1, 1.0),), user_id=0),
    )
    return BipartiteInstance(u_count=2, arrivals=arrivals, payload=payload)


def adwords_instance(budgets, edge_lists):
    arrivals = tuple(Arrival(edges=tuple(sorted(e))) for e in edge_lists)
    return BipartiteInstance(
        u_count=len(budgets), arrivals=arrivals, payload=AdwordsPayload(budgets=tuple(budgets))
    )


def test_reset_zeroes_everything(rng):
    inst = random_eobm_instance(rng)
    state = env.reset(inst)
    assert state.t == 0
    assert state.cumulative_reward == 0.0
    assert state.available.all()
    assert not state.terminal


def test_reset_adwords_budgets():
    inst = adwords_instance([1.2, 1.2], [[(0, 0.2)], [(1, 0.2)]])
    state = env.reset(inst)
    assert np.allclose(state.problem_state.remaining, [1.2, 1.2])


def test_reset_osbm_covered_empty():
    state = env.reset(osbm_two_arrivals())
    assert state.problem_state.covered == {}


def test_legal_mask_cases():
    inst = eobm_instance([[(0, 0.5), (2, 0.7)], [(2, 0.9)]], u_count=3)
    state = env.reset(inst)
    mask = env.legal_mask(state, inst.arrivals[0])
    assert mask.tolist() == [True, False, True, True]
    env.step(state, inst.arrivals[0], 2)
    mask = env.legal_mask(state, inst.arrivals[1])
    assert mask.tolist() == [False, False, False, True]


def test_legal_mask_adwords_depleted():
    inst = adwords_instance([0.2, 0.5], [[(0, 0.2), (1, 0.2)], [(0, 0.2), (1, 0.2)]])
    state = env.reset(inst)
    env.step(state, inst.arrivals[0], 0)  # depletes node 0 exactly
    mask = env.legal_mask(state, inst.arrivals[1])
    assert mask.tolist() == [False, True, True]


def test_step_eobm_reward_and_availability():
    inst = eobm_instance([[(1, 0.9)]], u_count=2)
    state = env.reset(inst)
    assert env.step(state, inst.arrivals[0], 1) == 0.9
    assert not state.available[1]
    assert state.cumulative_reward == 0.9
    assert state.terminal


def test_step_osbm_marginal_coverage():
    inst = osbm_two_arrivals()
    state = env.reset(inst)
    assert env.step(state, inst.arrivals[0], 0) == 3.0  # covers drama
    # movie {comedy, drama} with drama covered -> marginal = comedy weight 2
    assert env.step(state, inst.arrivals[1], 1) == 2.0
    assert state.cumulative_reward == 5.0


def test_step_adwords_min_rule():
    inst = adwords_instance([0.15], [[(0, 0.2)]])
    state = env.reset(inst)
    assert env.step(state, inst.arrivals[0], 0) == pytest.approx(0.15)
    assert state.problem_state.remaining[0] == 0.0
    assert not state.available[0]


def test_step_skip_reward_zero(rng):
    inst = random_eobm_instance(rng)
    state = env.reset(inst)
    assert env.step(state, inst.arrivals[0], inst.u_count) == 0.0


def test_illegal_action_raises():
    inst = eobm_instance([[(0, 0.5)], [(0, 0.4)]], u_count=2)
    state = env.reset(inst)
    with pytest.raises(env.IllegalActionError, match="no edge"):
        env.step(state, inst.arrivals[0], 1)
    env.step(state, inst.arrivals[0], 0)
    with pytest.raises(env.IllegalActionError, match="unavailable"):
        env.step(state, inst.arrivals[1], 0)


def test_rollout_always_skip(rng):
    inst = random_eobm_instance(rng)
    solution, records = env.rollout(inst, AlwaysSkipPolicy(), rng=rng)
    assert solution.objective_value == 0.0
    assert all(d is None for d in solution.decisions)
    assert len(records) == inst.horizon


def test_rollout_greedy_one_by_one():
    from matchlab.policies import make_policy

    inst = eobm_instance([[(0, 0.4)]], u_count=1)
    solution, _ = env.rollout(inst, make_policy("greedy"))
    assert solution.objective_value == pytest.approx(0.4)


def test_osbm_telescoping_against_recompute():
    for seed in range(200):
        rng = np.random.default_rng(seed)
        inst = random_osbm_instance(rng)
        solution, _ = env.rollout(inst, RandomLegalPolicy(), rng=rng)
        assert solution.objective_value == pytest.approx(
            coverage_objective(inst, solution.decisions), abs=1e-9
        )


def test_eobm_reward_is_sum_of_matched_weights(rng):
    for _ in range(50):
        inst = random_eobm_instance(rng)
        solution, _ = env.rollout(inst, RandomLegalPolicy(), rng=rng)
        total = 0.0
        for arr, d in zip(inst.arrivals, solution.decisions):
            if d is not None:
                total += dict(arr.edges)[d]
        assert solution.objective_value == pytest.approx(total, abs=1e-12)


def test_adwords_reward_is_total_spend(rng):
    for _ in range(50):
        inst = random_adwords_instance(rng)
        solution, _ = env.rollout(inst, RandomLegalPolicy(), rng=rng)
        state = env.reset(inst)
        for arr, d in zip(inst.arrivals, solution.decisions):
            env.step(state, arr, inst.u_count if d is None else d)
        budgets = np.array(inst.payload.budgets)
        spent = budgets - state.problem_state.remaining
        assert solution.objective_value == pytest.approx(spent.sum(), abs=1e-9)
        assert np.all(state.problem_state.remaining >= -1e-12)


def test_no_illegal_actions_in_sampled_rollouts(rng):
    steps = 0
    for seed in range(60):
        r = np.random.default_rng(seed)
        for builder in (random_eobm_instance, random_osbm_instance, random_adwords_instance):
            inst = builder(r)
            solution, _ = env.rollout(inst, RandomLegalPolicy(), rng=r)
            for arr, d in zip(inst.arrivals, solution.decisions):
                if d is not None:
                    assert d in {u for u, _ in arr.edges}
            steps += inst.horizon
    assert steps > 1000


def test_osbm_marginal_never_increases_with_coverage():
    # submodularity witness: marginal gain of a movie shrinks as covered grows
    for seed in range(100):
        rng = np.random.default_rng(seed)
        inst = random_osbm_instance(rng, u_count=4, genre_count=6)
        payload = inst.payload
        arrival = inst.arrivals[0]
        user = arrival.user_id
        g = payload.genre_count
        small = rng.random(g) < 0.4
        large = small | (rng.random(g) < 0.4)
        gains = []
        for cov in (small, large):
            state = env.reset(inst)
            state.problem_state.covered[user] = cov.copy()
            gains.append(env.action_values(state, arrival))
        assert np.all(gains[1] <= gains[0] + 1e-12)


def test_replay_matches_rollout(rng):
    inst = random_eobm_instance(rng)
    solution, _ = env.rollout(inst, RandomLegalPolicy(), rng=rng)
    assert env.replay(inst, solution.decisions) == pytest.approx(
        solution.objective_value, abs=1e-12
    )
