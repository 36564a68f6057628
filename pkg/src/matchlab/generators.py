"""Instance generators: ER and BA bigraphs, base-graph sampling, Adwords templates.

Every generator is deterministic given (spec, seed): instance i draws from an
independent RNG stream derived from the seed and i, so datasets are
reproducible byte-for-byte and instances can be generated in any order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .graph_core import (
    AdwordsPayload,
    Arrival,
    BipartiteInstance,
    EobmPayload,
    OsbmPayload,
)

RESAMPLE_CAP = 10**6  # attempts per arrival before giving up


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class GenSpec:
    """Parameters for one dataset: which family, sizes, family parameters, seed, count."""

    kind: str  # er | ba | base_graph | adwords_template
    u_count: int
    v_count: int
    seed: int
    count: int = 1
    p: float | None = None  # er: edge probability; ba: target average online degree
    base_path: str | None = None
    genres_path: str | None = None
    ratings_path: str | None = None
    fixed_nodes: bool = True  # base_graph: share the sampled U across instances
    template_path: str | None = None
    bid_range: tuple[float, float] = (0.1, 0.4)

    def __post_init__(self) -> None:
        if self.kind not in ("er", "ba", "base_graph", "adwords_template"):
            raise ValueError(f"unknown generator kind {self.kind!r}")
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.u_count < 1 or self.v_count < 1:
            raise ValueError("u_count and v_count must be >= 1")
        if self.kind == "er":
            if self.p is None or not (0 < self.p <= 1):
                raise ValueError(f"er requires p in (0, 1], got {self.p}")
        if self.kind == "ba":
            if self.p is None or not (0 < self.p < self.u_count):
                raise ValueError(f"ba requires 0 < p < u_count, got {self.p}")

    def params_meta(self) -> dict[str, Any]:
        out: dict[str, Any] = {"u_count": self.u_count, "v_count": self.v_count}
        if self.p is not None:
            out["p"] = self.p
        if self.kind == "base_graph":
            out["fixed_nodes"] = self.fixed_nodes
        if self.kind == "adwords_template":
            out["bid_range"] = list(self.bid_range)
        return out


@dataclass(frozen=True)
class BaseGraph:
    """An offline graph that instances are sampled from (e.g. a crowdsourcing or
    movie-ratings export)."""

    left_count: int
    right_count: int
    edges: tuple[tuple[int, int, float], ...]  # (left, right, weight)
    genres_per_left: tuple[frozenset[int], ...] | None = None
    user_weights: dict[int, tuple[float, ...]] | None = None
    genre_count: int = 0
    # right -> [(left, weight)] adjacency, derived
    right_adj: tuple[tuple[tuple[int, float], ...], ...] = field(
        init=False, repr=False, compare=False
    )

    def __post_init__(self) -> None:
        adj: list[list[tuple[int, float]]] = [[] for _ in range(self.right_count)]
        for left, right, w in self.edges:
            if not (0 <= left < self.left_count and 0 <= right < self.right_count):
                raise GenerationError(f"base graph edge ({left},{right}) out of range")
            if not (math.isfinite(w) and w > 0):
                raise GenerationError(f"base graph edge ({left},{right}) weight {w!r} invalid")
            adj[right].append((left, w))
        object.__setattr__(self, "right_adj", tuple(tuple(sorted(a)) for a in adj))

    @property
    def has_osbm(self) -> bool:
        return self.genres_per_left is not None and self.user_weights is not None


def _read_csv_rows(path: str) -> list[list[str]]:
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        for row in csv.reader(f):
            if not row or all(not c.strip() for c in row):
                continue
            rows.append([c.strip() for c in row])
    # tolerate a single header row of non-numeric cells
    if rows:
        try:
            float(rows[0][0])
        except ValueError:
            rows = rows[1:]
    return rows


def load_base_graph(
    path: str, genres_path: str | None = None, ratings_path: str | None = None
) -> BaseGraph:
    """Load a `u,v,w` edge CSV plus optional `u,genre` and `user,genre,rating` sidecars."""
    edges = []
    max_left = max_right = -1
    for row in _read_csv_rows(path):
        if len(row) != 3:
            raise GenerationError(f"{path}: expected u,v,w rows, got {row}")
        left, right, w = int(row[0]), int(row[1]), float(row[2])
        edges.append((left, right, w))
        max_left = max(max_left, left)
        max_right = max(max_right, right)
    if not edges:
        raise GenerationError(f"{path}: base graph has no edges")

    genres_per_left = None
    user_weights = None
    genre_count = 0
    if genres_path is not None:
        genre_sets: dict[int, set[int]] = {}
        for row in _read_csv_rows(genres_path):
            if len(row) != 2:
                raise GenerationError(f"{genres_path}: expected u,genre rows, got {row}")
            u, g = int(row[0]), int(row[1])
            genre_sets.setdefault(u, set()).add(g)
            genre_count = max(genre_count, g + 1)
            max_left = max(max_left, u)
        if ratings_path is None:
            raise GenerationError("genre sidecar given without a ratings sidecar")
        ratings: dict[int, dict[int, float]] = {}
        for row in _read_csv_rows(ratings_path):
            if len(row) != 3:
                raise GenerationError(f"{ratings_path}: expected user,genre,rating rows, got {row}")
            user, g, r = int(row[0]), int(row[1]), float(row[2])
            ratings.setdefault(user, {})[g] = r
            genre_count = max(genre_count, g + 1)
        genres_per_left = tuple(
            frozenset(genre_sets.get(u, set())) for u in range(max_left + 1)
        )
        user_weights = {
            user: tuple(per.get(g, 0.0) for g in range(genre_count))
            for user, per in ratings.items()
        }
    elif ratings_path is not None:
        raise GenerationError("ratings sidecar given without a genre sidecar")

    return BaseGraph(
        left_count=max_left + 1,
        right_count=max_right + 1,
        edges=tuple(edges),
        genres_per_left=genres_per_left,
        user_weights=user_weights,
        genre_count=genre_count,
    )


def _setup_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))


def instance_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, index)))


def gen_er(spec: GenSpec, rng: np.random.Generator) -> BipartiteInstance:
    """ER bigraph: each edge exists with probability p, weights uniform on (0, 1]."""
    arrivals = []
    for _ in range(spec.v_count):
        for attempt in range(RESAMPLE_CAP):
            mask = rng.random(spec.u_count) < spec.p
            if mask.any():
                break
        else:
            raise GenerationError(f"er: no edges after {RESAMPLE_CAP} redraws (seed {spec.seed})")
        us = np.flatnonzero(mask)
        weights = 1.0 - rng.random(len(us))  # U(0, 1]
        arrivals.append(Arrival(edges=tuple(zip(us.tolist(), weights.tolist()))))
    return BipartiteInstance(
        u_count=spec.u_count, arrivals=tuple(arrivals), payload=EobmPayload(), meta={}
    )


def ba_attachment_distribution(degrees: np.ndarray) -> np.ndarray:
    """mu(u) = (1 + degree(u)) / (|U| + sum of degrees)."""
    degrees = np.asarray(degrees, dtype=np.float64)
    return (1.0 + degrees) / (len(degrees) + degrees.sum())


def gen_ba(spec: GenSpec, rng: np.random.Generator) -> BipartiteInstance:
    """Preferential-attachment bigraph; weights track the fixed node's degree."""
    n = spec.u_count
    degrees = np.zeros(n, dtype=np.int64)
    sigma = spec.p / 5.0
    arrivals = []
    for _ in range(spec.v_count):
        n_v = 0
        for attempt in range(RESAMPLE_CAP):
            n_v = rng.binomial(n, spec.p / n)
            if n_v > 0:
                break
        else:
            raise GenerationError(f"ba: n_v drew 0 after {RESAMPLE_CAP} redraws (seed {spec.seed})")
        mu = ba_attachment_distribution(degrees)
        chosen: list[int] = []
        while len(chosen) < n_v:
            u = int(rng.choice(n, p=mu))
            if u not in chosen:  # rejection against already-chosen neighbours
                chosen.append(u)
        edges = []
        for u in chosen:
            w = rng.normal(float(degrees[u]), sigma)
            edges.append((u, max(w, 1e-6)))
        degrees[chosen] += 1
        edges.sort()
        arrivals.append(Arrival(edges=tuple(edges)))
    return BipartiteInstance(
        u_count=n, arrivals=tuple(arrivals), payload=EobmPayload(), meta={}
    )


def _sample_left_nodes(base: BaseGraph, k: int, rng: np.random.Generator) -> list[int]:
    if k > base.left_count:
        raise GenerationError(f"K={k} exceeds base graph left side ({base.left_count})")
    return rng.choice(base.left_count, size=k, replace=False).tolist()


def _base_instance(
    spec: GenSpec, base: BaseGraph, left_nodes: list[int], rng: np.random.Generator
) -> BipartiteInstance:
    index_of = {left: i for i, left in enumerate(left_nodes)}
    arrivals = []
    users_seen: set[int] = set()
    for _ in range(spec.v_count):
        for attempt in range(RESAMPLE_CAP):
            right = int(rng.integers(base.right_count))
            edges = [
                (index_of[left], w) for left, w in base.right_adj[right] if left in index_of
            ]
            if edges:
                break
        else:
            raise GenerationError(
                f"base_graph: no arrival with neighbours after {RESAMPLE_CAP} redraws "
                f"(seed {spec.seed})"
            )
        edges.sort()
        user = right if base.has_osbm else None
        if user is not None:
            users_seen.add(user)
        arrivals.append(Arrival(edges=tuple(edges), user_id=user))

    if base.has_osbm:
        payload: EobmPayload | OsbmPayload = OsbmPayload(
            genre_count=base.genre_count,
            genres_per_u=tuple(base.genres_per_left[left] for left in left_nodes),
            user_weights={l: base.user_weights[l] for l in sorted(users_seen)},
        )
    else:
        payload = EobmPayload()
    return BipartiteInstance(
        u_count=spec.u_count, arrivals=tuple(arrivals), payload=payload, meta={}
    )


def gen_from_base(
    spec: GenSpec, base: BaseGraph, rng_by_index: list[np.random.Generator]
) -> list[BipartiteInstance]:
    """Sample instances from a base graph; U is shared across instances unless var."""
    if spec.fixed_nodes:
        shared = _sample_left_nodes(base, spec.u_count, _setup_rng(spec.seed))
    out = []
    for i, rng in enumerate(rng_by_index):
        left_nodes = shared if spec.fixed_nodes else _sample_left_nodes(base, spec.u_count, rng)
        out.append(_base_instance(spec, base, left_nodes, rng))
    return out


def gen_adwords(
    spec: GenSpec, template: BaseGraph, rng: np.random.Generator
) -> BipartiteInstance:
    """One uniform-bid instance from an adjacency template: permute U, draw one bid."""
    if template.left_count != spec.u_count or template.right_count != spec.v_count:
        raise GenerationError(
            f"template is {template.left_count}x{template.right_count}, "
            f"spec wants {spec.u_count}x{spec.v_count}"
        )
    for right in range(template.right_count):
        if not template.right_adj[right]:
            raise GenerationError(f"template arrival {right} has no edges")
    lo, hi = spec.bid_range
    bid = lo + (hi - lo) * rng.random()
    perm = rng.permutation(spec.u_count)
    arrivals = []
    for right in range(template.right_count):
        edges = sorted((int(perm[left]), bid) for left, _ in template.right_adj[right])
        arrivals.append(Arrival(edges=tuple(edges)))
    budget = bid * spec.v_count / spec.u_count
    payload = AdwordsPayload(budgets=tuple([budget] * spec.u_count))
    return BipartiteInstance(
        u_count=spec.u_count, arrivals=tuple(arrivals), payload=payload, meta={}
    )


def generate_dataset(spec: GenSpec) -> list[BipartiteInstance]:
    """Generate spec.count instances, each from its own (seed, index) RNG stream."""
    rngs = [instance_rng(spec.seed, i) for i in range(spec.count)]
    if spec.kind == "er":
        instances = [gen_er(spec, rng) for rng in rngs]
    elif spec.kind == "ba":
        instances = [gen_ba(spec, rng) for rng in rngs]
    elif spec.kind == "base_graph":
        if spec.base_path is None:
            raise GenerationError("base_graph requires base_path")
        base = load_base_graph(spec.base_path, spec.genres_path, spec.ratings_path)
        instances = gen_from_base(spec, base, rngs)
    elif spec.kind == "adwords_template":
        if spec.template_path is None:
            raise GenerationError("adwords_template requires template_path")
        template = load_base_graph(spec.template_path)
        instances = [gen_adwords(spec, template, rng) for rng in rngs]
    else:  # pragma: no cover - rejected in GenSpec
        raise GenerationError(f"unknown kind {spec.kind}")
    out = []
    for i, inst in enumerate(instances):
        meta = {
            "generator": spec.kind,
            "seed": spec.seed,
            "index": i,
            "params": spec.params_meta(),
        }
        out.append(
            BipartiteInstance(
                u_count=inst.u_count, arrivals=inst.arrivals, payload=inst.payload, meta=meta
            )
        )
    return out
