from __future__ import annotations

import numpy as np
import pytest

from conftest import (
    eobm_instance,
    random_adwords_instance,
    random_eobm_instance,
    random_osbm_instance,
)

from matchlab import env, features
from matchlab.evaluation import permute_instance


def drive(instance, actions):
    """Step through a prefix of the instance with the given actions."""
    state = env.reset(instance)
    for arrival, a in zip(instance.arrivals, actions):
        env.step(state, arrival, a)
    return state


def test_graph_features_mean_and_variance():
    # u0 saw weights 0.2 and 0.4 strictly before the current arrival
    inst = eobm_instance([[(0, 0.2)], [(0, 0.4)], [(1, 0.9)]], u_count=2)
    state = drive(inst, [2, 2])
    env.begin_arrival(state, inst.arrivals[2])
    mu, var, _ = features.graph_features(state.features)
    assert mu[0] == pytest.approx(0.3)
    assert var[0] == pytest.approx(0.01)
    assert mu[2] == var[2] == 0.0  # skip slot


def test_graph_features_average_degree_includes_current():
    # u0 appears in arrivals 1 and 4 (the current one): 2 of 4 -> 0.5
    inst = eobm_instance(
        [[(0, 0.5)], [(1, 0.5)], [(1, 0.5)], [(0, 0.5), (1, 0.5)]], u_count=2
    )
    state = drive(inst, [2, 2, 2])
    env.begin_arrival(state, inst.arrivals[3])
    _, _, deg = features.graph_features(state.features)
    assert deg[0] == pytest.approx(0.5)
    assert deg[1] == pytest.approx(0.75)


def test_node_features_examples():
    edges = [[(u, 0.5) for u in range(3)]] + [[(0, 0.5)]] * 29
    inst = eobm_instance(edges, u_count=10)
    state = env.reset(inst)
    env.begin_arrival(state, inst.arrivals[0])
    pct, step = features.node_features(state.features, inst.arrivals[0])
    assert pct == pytest.approx(0.3)
    assert step == pytest.approx(1 / 30)
    state = drive(inst, [10] * 29)
    env.begin_arrival(state, inst.arrivals[29])
    _, step = features.node_features(state.features, inst.arrivals[29])
    assert step == pytest.approx(1.0)


def test_solution_features_examples():
    inst = eobm_instance(
        [[(0, 0.5)], [(1, 0.7)], [(2, 0.1)], [(3, 0.1)], [(4, 0.2)]], u_count=10
    )
    # match 0.5 and 0.7, skip twice (t = 4 after four decisions)
    state = drive(inst, [0, 1, 10, 10])
    h = features.solution_features(state.features)
    assert h[0] == pytest.approx(0.7)  # max
    assert h[1] == pytest.approx(0.5)  # min
    assert h[2] == pytest.approx(0.6)  # mean
    assert h[3] == pytest.approx(0.01)  # variance
    assert h[4] == pytest.approx(0.2)  # matched ratio 2/10
    assert h[5] == pytest.approx(0.5)  # 2 skips of 4
    assert h[6] == pytest.approx(0.12)  # p_t = (0.5+0.7)/10


def test_solution_features_one_skip_of_four():
    inst = eobm_instance([[(0, 0.5)], [(1, 0.7)], [(2, 0.1)], [(3, 0.1)]], u_count=10)
    state = drive(inst, [0, 1, 10, 3])
    h = features.solution_features(state.features)
    assert h[5] == pytest.approx(0.25)


def test_solution_features_empty_solution_all_zero(rng):
    inst = random_eobm_instance(rng)
    state = env.reset(inst)
    assert np.all(features.solution_features(state.features) == 0.0)


def test_inv_ff_skip_slot_before_normalization():
    inst = eobm_instance([[(0, 0.3), (2, 0.9)]], u_count=3)
    state = env.reset(inst)
    env.begin_arrival(state, inst.arrivals[0])
    rows = features.assemble_input("inv-ff", state, inst.arrivals[0], inst.payload, normalize=False)
    assert rows.shape == (4, 3)
    assert rows[3].tolist() == pytest.approx([0.0, 1.0, 0.6])  # w_mean = (0.3+0.9)/2
    assert rows[0].tolist() == pytest.approx([0.3, 0.0, 0.6])


def test_ff_input_layout():
    inst = eobm_instance([[(1, 0.5)]], u_count=2)
    state = env.reset(inst)
    env.begin_arrival(state, inst.arrivals[0])
    vec = features.assemble_input("ff", state, inst.arrivals[0], inst.payload, normalize=False)
    assert vec.tolist() == pytest.approx([0.0, 0.5, 0.0, 1.0, 1.0, 1.0])


def test_normalization_divides_by_running_max():
    inst = eobm_instance([[(0, 0.5), (1, 0.25)]], u_count=2)
    state = env.reset(inst)
    env.begin_arrival(state, inst.arrivals[0])
    vec = features.assemble_input("ff", state, inst.arrivals[0], inst.payload)
    assert vec[:3].tolist() == pytest.approx([1.0, 0.5, 0.0])


def test_golden_input_dims():
    # per-slot field count from the architecture definitions
    assert features.input_dim("inv-ff-hist", 10, "eobm") == 16
    assert features.input_dim("inv-ff-hist", 10, "adwords") == 18
    assert features.input_dim("inv-ff", 10, "eobm") == 3
    assert features.input_dim("inv-ff", 10, "adwords") == 4
    assert features.input_dim("ff", 10, "eobm") == 22
    assert features.input_dim("ff", 10, "adwords") == 33
    assert features.input_dim("ff-hist", 10, "eobm") == 64
    assert features.input_dim("ff-hist", 10, "adwords") == 86
    assert features.input_dim("ff-supervised", 10, "eobm") == 64


def test_assembled_shapes_match_input_dim(rng):
    for builder, problem in [
        (random_eobm_instance, "eobm"),
        (random_osbm_instance, "osbm"),
        (random_adwords_instance, "adwords"),
    ]:
        inst = builder(rng)
        state = env.reset(inst)
        env.begin_arrival(state, inst.arrivals[0])
        for kind in features.INPUT_KINDS:
            out = features.assemble_input(kind, state, inst.arrivals[0], inst.payload)
            dim = features.input_dim(kind, inst.u_count, problem)
            if kind.startswith("inv"):
                assert out.shape == (inst.u_count + 1, dim)
            else:
                assert out.shape == (dim,)


def scratch_accumulators(instance, actions, upto):
    """Independent recomputation of the feature accumulators after `upto` steps."""
    n = instance.u_count
    payload = instance.payload
    avail = [True] * n
    rem = list(payload.budgets) if instance.kind == "adwords" else None
    covered: dict[int, set[int]] = {}
    deg = [0] * n
    sum_w = [0.0] * n
    sumsq = [0.0] * n
    matched_vals = []
    skips = 0
    run_max = 0.0
    for t in range(upto):
        arr = instance.arrivals[t]
        vals = {}
        for u, w in arr.edges:
            if instance.kind == "eobm":
                vals[u] = w
            elif instance.kind == "osbm":
                got = covered.get(arr.user_id, set())
                vals[u] = sum(
                    payload.user_weights[arr.user_id][z]
                    for z in payload.genres_per_u[u]
                    if z not in got
                )
            else:
                vals[u] = min(w, rem[u])
        run_max = max([run_max] + list(vals.values()))
        a = actions[t]
        if a == n:
            skips += 1
        else:
            v = vals[a]
            matched_vals.append(v)
            if instance.kind == "eobm":
                avail[a] = False
            elif instance.kind == "osbm":
                covered.setdefault(arr.user_id, set()).update(payload.genres_per_u[a])
                avail[a] = False
            else:
                rem[a] -= v
        for u, v in vals.items():
            deg[u] += 1
            sum_w[u] += v
            sumsq[u] += v * v
    return deg, sum_w, sumsq, matched_vals, skips, run_max


def test_incremental_accumulators_match_scratch_recompute():
    total_steps = 0
    for seed in range(400):
        rng = np.random.default_rng(seed)
        builder = [random_eobm_instance, random_osbm_instance, random_adwords_instance][
            seed % 3
        ]
        inst = builder(rng, horizon=30) if seed % 3 != 1 else builder(rng, horizon=25)
        state = env.reset(inst)
        actions = []
        for arrival in inst.arrivals:
            env.begin_arrival(state, arrival)
            legal = np.flatnonzero(env.legal_mask(state, arrival))
            a = int(legal[rng.integers(len(legal))])
            env.step(state, arrival, a)
            actions.append(a)
            total_steps += 1
            fs = state.features
            deg, sum_w, sumsq, matched, skips, run_max = scratch_accumulators(
                inst, actions, len(actions)
            )
            assert fs.deg.tolist() == deg
            assert np.allclose(fs.sum_w, sum_w, atol=1e-9)
            assert np.allclose(fs.sumsq_w, sumsq, atol=1e-9)
            assert fs.m_count == len(matched)
            assert fs.m_sum == pytest.approx(sum(matched), abs=1e-9)
            assert fs.skip_count == skips
            assert fs.running_max == pytest.approx(run_max, abs=1e-12)
            if matched:
                assert fs.m_max == pytest.approx(max(matched), abs=1e-12)
                assert fs.m_min == pytest.approx(min(matched), abs=1e-12)
    assert total_steps >= 10**4


def test_features_bounded_in_unit_interval():
    # normalized inputs stay in [0, 1] for plain matching and coverage
    for seed in range(30):
        rng = np.random.default_rng(seed)
        inst = (random_eobm_instance if seed % 2 else random_osbm_instance)(rng, horizon=12)
        state = env.reset(inst)
        for arrival in inst.arrivals:
            env.begin_arrival(state, arrival)
            for kind in features.INPUT_KINDS:
                out = features.assemble_input(kind, state, arrival, inst.payload)
                assert np.all(out >= -1e-12) and np.all(out <= 1.0 + 1e-9), (kind, out)
            legal = np.flatnonzero(env.legal_mask(state, arrival))
            env.step(state, arrival, int(legal[rng.integers(len(legal))]))


def test_adwords_budget_features_bounded(rng):
    inst = random_adwords_instance(rng, u_count=4, horizon=12)
    state = env.reset(inst)
    for arrival in inst.arrivals:
        env.begin_arrival(state, arrival)
        rows = features.assemble_input("inv-ff-hist", state, arrival, inst.payload)
        assert np.all(rows[:, -2:] >= 0.0) and np.all(rows[:, -2:] <= 1.0)
        legal = np.flatnonzero(env.legal_mask(state, arrival))
        env.step(state, arrival, int(legal[rng.integers(len(legal))]))


def test_permutation_equivariance_of_features():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        inst = random_eobm_instance(rng, u_count=5, horizon=8)
        perm = rng.permutation(5)
        twin = permute_instance(inst, perm)
        state_a = env.reset(inst)
        state_b = env.reset(twin)
        for t in range(4):
            arr_a, arr_b = inst.arrivals[t], twin.arrivals[t]
            env.begin_arrival(state_a, arr_a)
            env.begin_arrival(state_b, arr_b)
            if t == 3:
                break
            legal = np.flatnonzero(env.legal_mask(state_a, arr_a))
            a = int(legal[rng.integers(len(legal))])
            env.step(state_a, arr_a, a)
            env.step(state_b, arr_b, a if a == 5 else int(perm[a]))
        ga = features.graph_features(state_a.features)
        gb = features.graph_features(state_b.features)
        for va, vb in zip(ga, gb):
            assert np.allclose(va[:5], np.array([vb[perm[u]] for u in range(5)]))
            assert va[5] == vb[5] == 0.0
        assert np.allclose(features.solution_features(state_a.features),
                           features.solution_features(state_b.features))
        rows_a = features.assemble_input("inv-ff-hist", state_a, arr_a, inst.payload)
        rows_b = features.assemble_input("inv-ff-hist", state_b, arr_b, twin.payload)
        assert np.allclose(rows_a[5], rows_b[5])
        for u in range(5):
            assert np.allclose(rows_a[u], rows_b[int(perm[u])])
