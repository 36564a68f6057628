"""Optimality-ratio evaluation, agreement curves, transfer grids, permutation stress.

Evaluation decodes greedily (argmax); per-instance RNG streams derive from
(seed, instance index) so results are independent of worker count.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import env, generators, offline, policies, serialize
from .graph_core import (
    AdwordsPayload,
    Arrival,
    BipartiteInstance,
    EobmPayload,
    OsbmPayload,
    Solution,
)


def eval_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(3, index)))


@dataclass
class EvalReport:
    policy: str
    dataset_hash: str
    seed: int
    decode_mode: str
    objectives: list[float] = field(default_factory=list)
    opts: list[float] = field(default_factory=list)
    ratios: list[float] = field(default_factory=list)
    opt_is_bound: list[bool] = field(default_factory=list)

    @property
    def mean_ratio(self) -> float:
        return float(np.mean(self.ratios))

    @property
    def std_ratio(self) -> float:
        return float(np.std(self.ratios))

    def quartiles(self) -> tuple[float, float, float]:
        q = np.percentile(self.ratios, [25, 50, 75])
        return float(q[0]), float(q[1]), float(q[2])

    def range_violations(self, tol: float = 1e-9) -> list[str]:
        """Ratios outside (0, 1 + tol]; an exact oracle can never be beaten and
        every instance admits a positive-value solution."""
        out = []
        for i, r in enumerate(self.ratios):
            if not (0.0 < r <= 1.0 + tol):
                out.append(f"instance {i}: ratio {r!r} outside (0, 1 + {tol}]")
        return out

    def summary(self) -> dict:
        q1, q2, q3 = self.quartiles()
        return {
            "policy": self.policy,
            "dataset_hash": self.dataset_hash,
            "seed": self.seed,
            "decode_mode": self.decode_mode,
            "count": len(self.ratios),
            "mean_ratio": self.mean_ratio,
            "std_ratio": self.std_ratio,
            "q25": q1,
            "median": q2,
            "q75": q3,
            "bound_based": sum(self.opt_is_bound),
        }


class ReplayPolicy:
    """Replays fixed per-instance decision sequences (e.g. oracle assignments)."""

    name = "oracle-replay"

    def __init__(self, instances: list[BipartiteInstance], assignments):
        self._by_id = {id(inst): a for inst, a in zip(instances, assignments)}

    def begin_episode(self, instance, rng):
        return {"decisions": self._by_id[id(instance)]}

    def act(self, state, arrival, rng=None, mode=None, ctx=None):
        d = ctx["decisions"][state.t]
        return env.StepRecord(state.u_count if d is None else int(d), 0.0, 0.0)


def oracle_replay_policy(
    instances: list[BipartiteInstance], entries: dict[int, offline.OracleEntry]
) -> ReplayPolicy:
    refused = [i for i, e in entries.items() if e.refused]
    if refused:
        raise ValueError(f"oracle refused {len(refused)} instances; cannot replay")
    return ReplayPolicy(
        instances, [entries[i].result.assignment for i in range(len(instances))]
    )


def _solutions(
    policy,
    instances: list[BipartiteInstance],
    seed: int,
    mode: str,
    workers: int = 1,
) -> list[Solution]:
    def run(i: int) -> Solution:
        solution, _ = env.rollout(instances[i], policy, mode=mode, rng=eval_rng(seed, i))
        return solution

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run, range(len(instances))))
    return [run(i) for i in range(len(instances))]


def evaluate(
    policy,
    instances: list[BipartiteInstance],
    entries: dict[int, offline.OracleEntry] | None,
    dataset_hash: str = "",
    seed: int = 0,
    workers: int = 1,
    mode: str = policies.GREEDY_DECODE,
    limits: offline.OracleLimits = offline.DEFAULT_LIMITS,
) -> EvalReport:
    """Greedy-decode rollouts against hindsight optima (or documented upper
    bounds, flagged, where the oracle refuses)."""
    report = EvalReport(
        policy=policy.name, dataset_hash=dataset_hash, seed=seed, decode_mode=mode
    )
    solutions = _solutions(policy, instances, seed, mode, workers)
    for i, inst in enumerate(instances):
        entry = entries.get(i) if entries else None
        if entry is None:
            entry = offline.solve_entry(inst, limits)
        if entry.refused:
            opt, is_bound = entry.bound, True
        else:
            opt, is_bound = entry.result.value, False
        obj = solutions[i].objective_value
        report.objectives.append(obj)
        report.opts.append(opt)
        report.ratios.append(obj / opt)
        report.opt_is_bound.append(is_bound)
    return report


def decisions_of(
    policy_or_assignments, instances: list[BipartiteInstance], seed: int
) -> list[tuple[int | None, ...]]:
    """Decision sequences per instance, from a policy or precomputed assignments."""
    if isinstance(policy_or_assignments, policies.PolicyModel):
        sols = _solutions(policy_or_assignments, instances, seed, policies.GREEDY_DECODE)
        return [s.decisions for s in sols]
    return [tuple(a) for a in policy_or_assignments]


def agreement_curve(
    policy: policies.PolicyModel,
    reference,
    instances: list[BipartiteInstance],
    seed: int = 0,
) -> np.ndarray:
    """Per-timestep fraction of instances where the policy's decision equals the
    reference's, each replayed on its own trajectory. Skip agrees with skip."""
    horizons = {inst.horizon for inst in instances}
    if len(horizons) != 1:
        raise ValueError(f"agreement needs a shared horizon, got {sorted(horizons)}")
    horizon = horizons.pop()
    ours = decisions_of(policy, instances, seed)
    theirs = decisions_of(reference, instances, seed)
    agree = np.zeros(horizon)
    for d_p, d_r in zip(ours, theirs):
        for t in range(horizon):
            if d_p[t] == d_r[t]:
                agree[t] += 1
    return agree / len(instances)


def supports_size(policy: policies.PolicyModel, u_count: int) -> bool:
    if policy.is_neural and not policy.invariant:
        return policy.u_count == u_count
    return True


def transfer_eval(
    policy: policies.PolicyModel,
    sizes: list[tuple[int, int]],
    make_spec,
    count: int = 100,
    seed: int = 0,
    workers: int = 1,
    limits: offline.OracleLimits = offline.DEFAULT_LIMITS,
) -> dict[tuple[int, int], float | None]:
    """Mean ratio per (u, v) cell on fresh seeded test sets; sizes a non-invariant
    policy cannot accept are reported as missing (None)."""
    grid: dict[tuple[int, int], float | None] = {}
    for u, v in sizes:
        if not supports_size(policy, u):
            grid[(u, v)] = None
            continue
        spec: generators.GenSpec = make_spec(u, v)
        instances = generators.generate_dataset(spec)
        report = evaluate(
            policy, instances, None, dataset_hash=f"transfer-{u}x{v}", seed=seed,
            workers=workers, limits=limits,
        )
        grid[(u, v)] = report.mean_ratio
    return grid


def permute_instance(instance: BipartiteInstance, perm: np.ndarray) -> BipartiteInstance:
    """Relabel fixed nodes: old index u becomes perm[u]."""
    arrivals = []
    for arr in instance.arrivals:
        edges = sorted((int(perm[u]), w) for u, w in arr.edges)
        arrivals.append(Arrival(edges=tuple(edges), user_id=arr.user_id))
    payload = instance.payload
    n = instance.u_count
    if isinstance(payload, OsbmPayload):
        genres: list[frozenset[int]] = [frozenset()] * n
        for u, g in enumerate(payload.genres_per_u):
            genres[int(perm[u])] = g
        payload = OsbmPayload(
            genre_count=payload.genre_count,
            genres_per_u=tuple(genres),
            user_weights=payload.user_weights,
        )
    elif isinstance(payload, AdwordsPayload):
        budgets = [0.0] * n
        for u, b in enumerate(payload.budgets):
            budgets[int(perm[u])] = b
        payload = AdwordsPayload(budgets=tuple(budgets))
    else:
        payload = EobmPayload()
    return BipartiteInstance(
        u_count=n, arrivals=tuple(arrivals), payload=payload, meta=dict(instance.meta)
    )


def permutation_stress(
    policy: policies.PolicyModel,
    instances: list[BipartiteInstance],
    entries: dict[int, offline.OracleEntry] | None,
    dataset_hash: str = "",
    seed: int = 0,
    workers: int = 1,
) -> tuple[EvalReport, EvalReport]:
    """Evaluate on the dataset and on a per-instance fixed-node-permuted twin.

    The permuted instance's optimum equals the original's (relabeling), so
    oracle entries are shared.
    """
    permuted = []
    for i, inst in enumerate(instances):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(4, i)))
        permuted.append(permute_instance(inst, rng.permutation(inst.u_count)))
    original = evaluate(policy, instances, entries, dataset_hash, seed, workers)
    twin = evaluate(policy, permuted, entries, dataset_hash + ":permuted", seed, workers)
    return original, twin


REPORT_COLUMNS = (
    "dataset_hash",
    "instance_idx",
    "policy",
    "objective",
    "opt",
    "ratio",
    "decode_mode",
    "seed",
    "opt_is_bound",
)


def write_report_csv(report: EvalReport, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(REPORT_COLUMNS)
        for i in range(len(report.ratios)):
            writer.writerow(
                [
                    report.dataset_hash,
                    i,
                    report.policy,
                    serialize.fmt_float(report.objectives[i]),
                    serialize.fmt_float(report.opts[i]),
                    serialize.fmt_float(report.ratios[i]),
                    report.decode_mode,
                    report.seed,
                    int(report.opt_is_bound[i]),
                ]
            )


def write_summary(report: EvalReport, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(serialize.dumps(report.summary()))
        f.write("\n")


def write_agreement_csv(curve: np.ndarray, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("timestep", "fraction"))
        for t, frac in enumerate(curve):
            writer.writerow((t, serialize.fmt_float(float(frac))))
