"""Hindsight-optimal oracles and the per-instance oracle cache.

* plain matching: exact max-weight assignment (augmenting-path Hungarian on a
  zero-padded square matrix, maximization by negation);
* coverage objective: exact depth-first branch-and-bound over arrivals with an
  admissible bound (current value + each unmatched movie's best remaining
  marginal gain), refusing instances beyond configured limits;
* budgeted objective: exact for uniform bids via integer max-flow with
  per-node capacities budget/bid; non-uniform bids are refused.

Every returned assignment replays through the environment to the reported
optimum (the cross-module consistency contract).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import env, serialize
from .graph_core import (
    AdwordsPayload,
    BipartiteInstance,
    EobmPayload,
    OsbmPayload,
)


class OracleRefused(RuntimeError):
    """An instance falls outside what the exact solver is allowed to attempt."""


@dataclass(frozen=True)
class OracleLimits:
    osbm_max_u: int = 12
    osbm_max_v: int = 40
    osbm_max_genres: int = 20
    osbm_node_budget: int = 10**7


DEFAULT_LIMITS = OracleLimits()


@dataclass(frozen=True)
class OracleResult:
    value: float
    assignment: tuple[int | None, ...]  # per arrival: matched fixed node or None
    nodes_explored: int | None = None
    root_bound: float | None = None


def _min_cost_assignment(cost: np.ndarray) -> np.ndarray:
    """Exact square assignment (potentials + shortest augmenting paths), O(n^3).

    Returns row_of_col: for each column j, the row assigned to it.
    """
    n = cost.shape[0]
    u_pot = np.zeros(n + 1)
    v_pot = np.zeros(n + 1)
    row_of = np.zeros(n + 1, dtype=np.int64)  # column j (1-based) -> row (1-based, 0 = free)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        row_of[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = row_of[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u_pot[i0] - v_pot[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            free_idx = np.flatnonzero(free) + 1
            j1 = int(free_idx[np.argmin(minv[free_idx])])
            delta = minv[j1]
            u_pot[row_of[used]] += delta
            v_pot[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if row_of[j0] == 0:
                break
        while j0 != 0:
            j1 = int(way[j0])
            row_of[j0] = row_of[j1]
            j0 = j1
    return row_of[1:] - 1  # 0-based; every column gets some row (matrix is complete)


def solve_eobm(instance: BipartiteInstance) -> OracleResult:
    """Max-weight matching of arrivals to fixed nodes; zero-value pairs are skips."""
    if not isinstance(instance.payload, EobmPayload):
        raise OracleRefused(f"solve_eobm got a {instance.kind!r} instance")
    n_u, horizon = instance.u_count, instance.horizon
    n = max(n_u, horizon)
    weight = np.zeros((n, n))
    for t, arr in enumerate(instance.arrivals):
        weight[arr.u_idx, t] = arr.weights
    row_of_col = _min_cost_assignment(-weight)
    assignment: list[int | None] = []
    value = 0.0
    for t in range(horizon):
        u = int(row_of_col[t])
        if u < n_u and weight[u, t] > 0.0:
            assignment.append(u)
            value += weight[u, t]
        else:
            assignment.append(None)
    return OracleResult(value=value, assignment=tuple(assignment))


def solve_osbm(
    instance: BipartiteInstance, limits: OracleLimits = DEFAULT_LIMITS
) -> OracleResult:
    """Exact coverage optimum by branch-and-bound over the arrival decisions."""
    payload = instance.payload
    if not isinstance(payload, OsbmPayload):
        raise OracleRefused(f"solve_osbm got a {instance.kind!r} instance")
    if (
        instance.u_count > limits.osbm_max_u
        or instance.horizon > limits.osbm_max_v
        or payload.genre_count > limits.osbm_max_genres
    ):
        raise OracleRefused(
            f"instance {instance.u_count}x{instance.horizon} with {payload.genre_count} "
            f"genres exceeds oracle limits {limits.osbm_max_u}x{limits.osbm_max_v}/"
            f"{limits.osbm_max_genres}"
        )
    horizon = instance.horizon
    genre_idx, user_w = env.osbm_arrays(payload)
    users = [arr.user_id for arr in instance.arrivals]
    covered = {l: np.zeros(payload.genre_count, dtype=bool) for l in set(users)}
    available = np.ones(instance.u_count, dtype=bool)
    # future arrivals (by user) adjacent to each fixed node, for the bound
    future_users: list[list[tuple[int, int]]] = [[] for _ in range(instance.u_count)]
    for t, arr in enumerate(instance.arrivals):
        for u in arr.u_idx:
            future_users[u].append((t, users[t]))

    def gain(u: int, user: int) -> float:
        idx = genre_idx[u]
        cov = covered[user]
        return float(user_w[user][idx[~cov[idx]]].sum())

    def bound_from(t: int, value: float) -> float:
        total = value
        for u in range(instance.u_count):
            if not available[u]:
                continue
            best = 0.0
            for t2, user in future_users[u]:
                if t2 >= t:
                    best = max(best, gain(u, user))
            total += best
        return total

    nodes = 0
    best_value = -math.inf
    best_assignment: list[int | None] = [None] * horizon
    current: list[int | None] = [None] * horizon
    root_bound = bound_from(0, 0.0)

    def dfs(t: int, value: float) -> None:
        nonlocal nodes, best_value, best_assignment
        nodes += 1
        if nodes > limits.osbm_node_budget:
            raise OracleRefused(f"node budget {limits.osbm_node_budget} exhausted")
        if t == horizon:
            if value > best_value:
                best_value = value
                best_assignment = current.copy()
            return
        if bound_from(t, value) <= best_value + 1e-12:
            return
        arr = instance.arrivals[t]
        user = users[t]
        options = [int(u) for u in arr.u_idx if available[u]]
        options.sort(key=lambda u: -gain(u, user))
        for u in options:
            g = gain(u, user)
            idx = genre_idx[u]
            newly = idx[~covered[user][idx]]
            available[u] = False
            covered[user][newly] = True
            current[t] = u
            dfs(t + 1, value + g)
            current[t] = None
            covered[user][newly] = False
            available[u] = True
        dfs(t + 1, value)  # skip branch

    dfs(0, 0.0)
    return OracleResult(
        value=best_value,
        assignment=tuple(best_assignment),
        nodes_explored=nodes,
        root_bound=root_bound,
    )


class _Dinic:
    def __init__(self, n: int):
        self.n = n
        self.to: list[int] = []
        self.cap: list[int] = []
        self.head: list[list[int]] = [[] for _ in range(n)]

    def add(self, a: int, b: int, cap: int) -> int:
        idx = len(self.to)
        self.to.append(b)
        self.cap.append(cap)
        self.head[a].append(idx)
        self.to.append(a)
        self.cap.append(0)
        self.head[b].append(idx + 1)
        return idx

    def max_flow(self, s: int, t: int) -> int:
        flow = 0
        while True:
            level = [-1] * self.n
            level[s] = 0
            queue = [s]
            for a in queue:
                for idx in self.head[a]:
                    b = self.to[idx]
                    if self.cap[idx] > 0 and level[b] < 0:
                        level[b] = level[a] + 1
                        queue.append(b)
            if level[t] < 0:
                return flow
            it = [0] * self.n

            def dfs(a: int, pushed: int) -> int:
                if a == t:
                    return pushed
                while it[a] < len(self.head[a]):
                    idx = self.head[a][it[a]]
                    b = self.to[idx]
                    if self.cap[idx] > 0 and level[b] == level[a] + 1:
                        got = dfs(b, min(pushed, self.cap[idx]))
                        if got:
                            self.cap[idx] -= got
                            self.cap[idx ^ 1] += got
                            return got
                    it[a] += 1
                return 0

            while True:
                pushed = dfs(s, 1 << 60)
                if not pushed:
                    break
                flow += pushed


def solve_adwords_uniform(instance: BipartiteInstance) -> OracleResult:
    """Exact optimum when all bids are equal and budgets are multiples of the bid."""
    payload = instance.payload
    if not isinstance(payload, AdwordsPayload):
        raise OracleRefused(f"solve_adwords_uniform got a {instance.kind!r} instance")
    bid = float(instance.arrivals[0].weights[0])
    for arr in instance.arrivals:
        if np.any(np.abs(arr.weights - bid) > 1e-12 * max(bid, 1.0)):
            raise OracleRefused("bids are not uniform; general offline Adwords is out of scope")
    caps = []
    for u, b in enumerate(payload.budgets):
        k = round(b / bid)
        if abs(b - k * bid) > 1e-9 * max(b, 1.0) or k < 1:
            raise OracleRefused(f"budget of node {u} is not a positive multiple of the bid")
        caps.append(int(k))
    n_u, horizon = instance.u_count, instance.horizon
    s, t = 0, 1 + horizon + n_u
    net = _Dinic(t + 1)
    arrival_edges: list[list[tuple[int, int]]] = []  # per arrival: (edge idx, u)
    for j, arr in enumerate(instance.arrivals):
        net.add(s, 1 + j, 1)
        arrival_edges.append([(net.add(1 + j, 1 + horizon + int(u), 1), int(u)) for u in arr.u_idx])
    for u in range(n_u):
        net.add(1 + horizon + u, t, caps[u])
    flow = net.max_flow(s, t)
    assignment: list[int | None] = []
    for j in range(horizon):
        match = None
        for idx, u in arrival_edges[j]:
            if net.cap[idx] == 0:  # saturated = used
                match = u
                break
        assignment.append(match)
    return OracleResult(value=bid * flow, assignment=tuple(assignment))


def solve_instance(
    instance: BipartiteInstance, limits: OracleLimits = DEFAULT_LIMITS
) -> OracleResult:
    if instance.kind == "eobm":
        return solve_eobm(instance)
    if instance.kind == "osbm":
        return solve_osbm(instance, limits)
    return solve_adwords_uniform(instance)


def hindsight_targets(instance: BipartiteInstance, result: OracleResult) -> list[int]:
    """Per-timestep class targets; the skip class is index u_count."""
    n = instance.u_count
    return [n if d is None else int(d) for d in result.assignment]


def osbm_upper_bound(instance: BipartiteInstance) -> float:
    """Every user covered by all genres of all movies adjacent to their arrivals."""
    payload = instance.payload
    reachable: dict[int, set[int]] = {}
    for arr in instance.arrivals:
        acc = reachable.setdefault(arr.user_id, set())
        for u in arr.u_idx:
            acc |= payload.genres_per_u[u]
    total = 0.0
    for l, genres in reachable.items():
        w = payload.user_weights[l]
        total += sum(w[z] for z in genres)
    return total


def adwords_upper_bound(instance: BipartiteInstance) -> float:
    budgets = sum(instance.payload.budgets)
    per_arrival = sum(float(arr.weights.max()) for arr in instance.arrivals)
    return min(budgets, per_arrival)


def upper_bound(instance: BipartiteInstance) -> float:
    if instance.kind == "osbm":
        return osbm_upper_bound(instance)
    if instance.kind == "adwords":
        return adwords_upper_bound(instance)
    raise OracleRefused("no upper bound defined for plain matching (oracle is exact)")


# ---------------------------------------------------------------------------
# Oracle cache: JSON lines keyed by dataset hash + instance index.


@dataclass(frozen=True)
class OracleEntry:
    result: OracleResult | None  # None when the oracle refused
    refused_reason: str | None = None
    bound: float | None = None  # documented upper bound for refused instances

    @property
    def refused(self) -> bool:
        return self.result is None


def cache_path_for(dataset_path: str, dataset_hash: str) -> str:
    root = os.environ.get("MATCHLAB_CACHE")
    if root:
        os.makedirs(root, exist_ok=True)
        return os.path.join(root, f"{dataset_hash}.oracle.jsonl")
    return dataset_path + ".oracle.jsonl"


def load_cache(path: str, dataset_hash: str) -> dict[int, OracleEntry] | None:
    """Returns the cached entries, or None if the file is missing/corrupt/stale."""
    if not os.path.exists(path):
        return None
    entries: dict[int, OracleEntry] = {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            header = serialize.loads(f.readline())
            if header.get("dataset_hash") != dataset_hash:
                return None
            for line in f:
                line = line.strip()
                if not line:
                    continue
                obj = serialize.loads(line)
                idx = int(obj["idx"])
                if obj.get("refused"):
                    entries[idx] = OracleEntry(
                        None, refused_reason=obj["refused"], bound=obj.get("bound")
                    )
                else:
                    entries[idx] = OracleEntry(
                        OracleResult(
                            value=float(obj["opt"]),
                            assignment=tuple(obj["assignment"]),
                            nodes_explored=obj.get("nodes"),
                            root_bound=obj.get("root_bound"),
                        )
                    )
    except (ValueError, KeyError, OSError):
        return None
    return entries


def write_cache(path: str, dataset_hash: str, entries: dict[int, OracleEntry]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(serialize.dumps({"dataset_hash": dataset_hash}))
        f.write("\n")
        for idx in sorted(entries):
            e = entries[idx]
            if e.refused:
                obj = {"idx": idx, "refused": e.refused_reason, "bound": e.bound}
            else:
                obj = {
                    "idx": idx,
                    "opt": e.result.value,
                    "assignment": list(e.result.assignment),
                    "nodes": e.result.nodes_explored,
                    "root_bound": e.result.root_bound,
                }
            f.write(serialize.dumps(obj))
            f.write("\n")


def solve_entry(instance: BipartiteInstance, limits: OracleLimits = DEFAULT_LIMITS) -> OracleEntry:
    try:
        return OracleEntry(solve_instance(instance, limits))
    except OracleRefused as exc:
        return OracleEntry(None, refused_reason=str(exc), bound=upper_bound(instance))


def ensure_oracle(
    instances: list[BipartiteInstance],
    dataset_hash: str,
    cache_path: str,
    limits: OracleLimits = DEFAULT_LIMITS,
    workers: int = 1,
) -> dict[int, OracleEntry]:
    """Load cached oracle results, solving and persisting whatever is missing."""
    entries = load_cache(cache_path, dataset_hash) or {}
    missing = [i for i in range(len(instances)) if i not in entries]
    if missing:
        if workers > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=workers) as pool:
                solved = list(pool.map(lambda i: solve_entry(instances[i], limits), missing))
        else:
            solved = [solve_entry(instances[i], limits) for i in missing]
        entries.update(dict(zip(missing, solved)))
        write_cache(cache_path, dataset_hash, entries)
    return entries
