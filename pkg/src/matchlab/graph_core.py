"""Bipartite instance data model and the line-delimited dataset file format.

An instance is a fixed left side of ``u_count`` nodes plus an ordered stream
of arrivals; the arrival order is part of the instance. Three problem payloads
are supported:

* ``eobm``    - plain edge weights, maximize total matched weight
* ``osbm``    - movie/genre coverage: each fixed node carries a genre set and
                each arriving user a per-genre rating vector
* ``adwords`` - per-fixed-node budgets depleted by edge bids

Dataset files are JSON lines, one instance per line, floats written with 17
significant digits so write/read round-trips are byte-exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Union

import numpy as np

from . import serialize


class DatasetError(ValueError):
    """Raised when a dataset file or record violates the format contract."""


@dataclass(frozen=True)
class Arrival:
    """One online node: its edges to fixed nodes, sorted by fixed-node index."""

    edges: tuple[tuple[int, float], ...]
    user_id: int | None = None
    # Derived arrays for hot loops; not part of identity.
    u_idx: np.ndarray = field(init=False, repr=False, compare=False)
    weights: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        edges = tuple((int(u), float(w)) for u, w in self.edges)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "u_idx", np.array([u for u, _ in edges], dtype=np.int64))
        object.__setattr__(self, "weights", np.array([w for _, w in edges], dtype=np.float64))


@dataclass(frozen=True)
class EobmPayload:
    kind = "eobm"


@dataclass(frozen=True)
class OsbmPayload:
    kind = "osbm"

    genre_count: int
    genres_per_u: tuple[frozenset[int], ...]
    user_weights: dict[int, tuple[float, ...]]

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "genres_per_u", tuple(frozenset(int(g) for g in s) for s in self.genres_per_u)
        )
        object.__setattr__(
            self,
            "user_weights",
            {int(l): tuple(float(w) for w in v) for l, v in self.user_weights.items()},
        )


@dataclass(frozen=True)
class AdwordsPayload:
    kind = "adwords"

    budgets: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "budgets", tuple(float(b) for b in self.budgets))


ProblemPayload = Union[EobmPayload, OsbmPayload, AdwordsPayload]


@dataclass(frozen=True)
class BipartiteInstance:
    u_count: int
    arrivals: tuple[Arrival, ...]
    payload: ProblemPayload
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "arrivals", tuple(self.arrivals))

    @property
    def horizon(self) -> int:
        return len(self.arrivals)

    @property
    def kind(self) -> str:
        return self.payload.kind


@dataclass(frozen=True)
class Solution:
    """Per-timestep decisions (fixed-node index or None for skip) and the objective."""

    decisions: tuple[int | None, ...]
    objective_value: float


def validate(instance: BipartiteInstance) -> list[str]:
    """Check every type invariant; returns one message per violation (empty if valid)."""
    out: list[str] = []
    n = instance.u_count
    if not isinstance(n, int) or n < 1:
        out.append(f"u_count must be a positive integer, got {n!r}")
        return out
    payload = instance.payload
    for t, arr in enumerate(instance.arrivals):
        if len(arr.edges) == 0:
            out.append(f"arrival {t}: no edges (every arrival must have at least one)")
        prev_u = -1
        for u, w in arr.edges:
            if u <= prev_u:
                out.append(f"arrival {t}: edges not sorted by u or duplicate u={u}")
            prev_u = u
            if not (0 <= u < n):
                out.append(f"arrival {t}: edge u={u} out of range (u_count={n})")
            if not (math.isfinite(w) and w > 0):
                out.append(f"arrival {t}: edge (u={u}) weight {w!r} not strictly positive finite")
        if isinstance(payload, OsbmPayload):
            if arr.user_id is None:
                out.append(f"arrival {t}: osbm arrival missing user id")
            elif arr.user_id not in payload.user_weights:
                out.append(f"arrival {t}: unknown user id {arr.user_id}")
    if isinstance(payload, OsbmPayload):
        g = payload.genre_count
        if g < 1:
            out.append(f"payload: genre_count must be >= 1, got {g}")
        if len(payload.genres_per_u) != n:
            out.append(f"payload: genres_per_u has {len(payload.genres_per_u)} entries, expected {n}")
        for u, genres in enumerate(payload.genres_per_u):
            if not genres:
                out.append(f"payload: fixed node {u} has empty genre set")
            for z in genres:
                if not (0 <= z < g):
                    out.append(f"payload: fixed node {u} genre {z} out of range (genre_count={g})")
        for l, vec in payload.user_weights.items():
            if len(vec) != g:
                out.append(f"payload: user {l} weight vector length {len(vec)}, expected {g}")
            for z, w in enumerate(vec):
                if not (math.isfinite(w) and w >= 0):
                    out.append(f"payload: user {l} genre {z} weight {w!r} not finite non-negative")
    elif isinstance(payload, AdwordsPayload):
        if len(payload.budgets) != n:
            out.append(f"payload: budgets has {len(payload.budgets)} entries, expected {n}")
        for u, b in enumerate(payload.budgets):
            if not (math.isfinite(b) and b > 0):
                out.append(f"payload: budget of node {u} is {b!r}, must be > 0 and finite")
    elif not isinstance(payload, EobmPayload):
        out.append(f"payload: unknown payload type {type(payload).__name__}")
    return out


def _arrival_to_obj(arr: Arrival) -> dict[str, Any]:
    obj: dict[str, Any] = {"edges": [[u, w] for u, w in arr.edges]}
    if arr.user_id is not None:
        obj["user"] = arr.user_id
    return obj


def _payload_to_obj(payload: ProblemPayload) -> dict[str, Any]:
    if isinstance(payload, EobmPayload):
        return {"kind": "eobm"}
    if isinstance(payload, OsbmPayload):
        return {
            "kind": "osbm",
            "genre_count": payload.genre_count,
            "genres_per_u": [sorted(s) for s in payload.genres_per_u],
            "user_weights": {str(l): list(v) for l, v in payload.user_weights.items()},
        }
    if isinstance(payload, AdwordsPayload):
        return {"kind": "adwords", "budgets": list(payload.budgets)}
    raise DatasetError(f"unknown payload type {type(payload).__name__}")


def instance_to_line(instance: BipartiteInstance) -> str:
    return serialize.dumps(
        {
            "u_count": instance.u_count,
            "arrivals": [_arrival_to_obj(a) for a in instance.arrivals],
            "payload": _payload_to_obj(instance.payload),
            "meta": instance.meta,
        }
    )


def _payload_from_obj(obj: dict[str, Any], where: str) -> ProblemPayload:
    kind = obj.get("kind")
    if kind == "eobm":
        return EobmPayload()
    if kind == "osbm":
        try:
            return OsbmPayload(
                genre_count=int(obj["genre_count"]),
                genres_per_u=tuple(frozenset(s) for s in obj["genres_per_u"]),
                user_weights={int(l): tuple(v) for l, v in obj["user_weights"].items()},
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{where}: malformed osbm payload ({exc})") from exc
    if kind == "adwords":
        try:
            return AdwordsPayload(budgets=tuple(obj["budgets"]))
        except (KeyError, TypeError) as exc:
            raise DatasetError(f"{where}: malformed adwords payload ({exc})") from exc
    raise DatasetError(f"{where}: unknown payload kind {kind!r}")


def instance_from_line(line: str, where: str = "record") -> BipartiteInstance:
    try:
        obj = serialize.loads(line)
    except ValueError as exc:
        raise DatasetError(f"{where}: invalid JSON ({exc})") from exc
    try:
        arrivals = tuple(
            Arrival(
                edges=tuple((u, w) for u, w in a["edges"]),
                user_id=a.get("user"),
            )
            for a in obj["arrivals"]
        )
        instance = BipartiteInstance(
            u_count=int(obj["u_count"]),
            arrivals=arrivals,
            payload=_payload_from_obj(obj["payload"], where),
            meta=dict(obj.get("meta", {})),
        )
    except DatasetError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"{where}: malformed record ({exc})") from exc
    violations = validate(instance)
    if violations:
        raise DatasetError(f"{where}: " + "; ".join(violations))
    return instance


def write_dataset(instances: list[BipartiteInstance], path: str) -> None:
    """Write one instance per line; equal inputs produce byte-identical files."""
    if instances:
        first = instances[0]
        for i, inst in enumerate(instances):
            if inst.kind != first.kind:
                raise DatasetError(
                    f"instance {i}: payload kind {inst.kind!r} differs from {first.kind!r}"
                )
            if inst.u_count != first.u_count or inst.horizon != first.horizon:
                raise DatasetError(
                    f"instance {i}: size {inst.u_count}x{inst.horizon} differs from "
                    f"{first.u_count}x{first.horizon}"
                )
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for inst in instances:
            f.write(instance_to_line(inst))
            f.write("\n")


def read_dataset(path: str) -> list[BipartiteInstance]:
    """Read and validate a dataset file; raises DatasetError naming line and field."""
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for i, line in enumerate(f):
            line = line.strip()
            if not line:
                continue
            out.append(instance_from_line(line, where=f"line {i + 1}"))
    return out


def dataset_hash(path: str) -> str:
    return serialize.file_sha256(path)
