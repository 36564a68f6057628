"""Shared instance builders for the test suite."""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

SRC = Path(__file__).resolve().parent.parent / "src"
if str(SRC) not in sys.path:
    sys.path.insert(0, str(SRC))

from matchlab.graph_core import (  # noqa: E402
    AdwordsPayload,
    Arrival,
    BipartiteInstance,
    EobmPayload,
    OsbmPayload,
)


def eobm_instance(edge_lists, u_count):
    """edge_lists: per arrival, list of (u, w)."""
    arrivals = tuple(Arrival(edges=tuple(sorted(e))) for e in edge_lists)
    return BipartiteInstance(u_count=u_count, arrivals=arrivals, payload=EobmPayload())


def random_eobm_instance(rng, u_count=4, horizon=6, p=0.6):
    arrivals = []
    for _ in range(horizon):
        while True:
            mask = rng.random(u_count) < p
            if mask.any():
                break
        edges = [(int(u), float(1.0 - rng.random())) for u in np.flatnonzero(mask)]
        arrivals.append(Arrival(edges=tuple(edges)))
    return BipartiteInstance(u_count=u_count, arrivals=tuple(arrivals), payload=EobmPayload())


def random_osbm_instance(rng, u_count=3, horizon=5, genre_count=4, n_users=3, p=0.7):
    genres = []
    for _ in range(u_count):
        size = int(rng.integers(1, genre_count + 1))
        genres.append(frozenset(rng.choice(genre_count, size=size, replace=False).tolist()))
    user_weights = {
        l: tuple(np.round(rng.random(genre_count) * 5, 3).tolist()) for l in range(n_users)
    }
    arrivals = []
    for _ in range(horizon):
        while True:
            mask = rng.random(u_count) < p
            if mask.any():
                break
        edges = [(int(u), float(1.0 - rng.random())) for u in np.flatnonzero(mask)]
        arrivals.append(Arrival(edges=tuple(edges), user_id=int(rng.integers(n_users))))
    payload = OsbmPayload(
        genre_count=genre_count, genres_per_u=tuple(genres), user_weights=user_weights
    )
    return BipartiteInstance(u_count=u_count, arrivals=tuple(arrivals), payload=payload)


def random_adwords_instance(rng, u_count=3, horizon=9, p=0.7, bid=None):
    """Uniform-bid instance with budgets bid * horizon / u_count (exact multiples)."""
    if bid is None:
        bid = float(np.round(0.1 + 0.3 * rng.random(), 6))
    arrivals = []
    for _ in range(horizon):
        while True:
            mask = rng.random(u_count) < p
            if mask.any():
                break
        edges = [(int(u), bid) for u in np.flatnonzero(mask)]
        arrivals.append(Arrival(edges=tuple(edges)))
    budget = bid * (horizon // u_count)
    payload = AdwordsPayload(budgets=tuple([budget] * u_count))
    return BipartiteInstance(u_count=u_count, arrivals=tuple(arrivals), payload=payload)


def random_instance(rng, kind):
    if kind == "eobm":
        return random_eobm_instance(rng)
    if kind == "osbm":
        return random_osbm_instance(rng)
    return random_adwords_instance(rng)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


class AlwaysSkipPolicy:
    name = "always-skip"

    def begin_episode(self, instance, rng):
        return None

    def act(self, state, arrival, rng=None, mode=None, ctx=None):
        from matchlab.env import StepRecord

        return StepRecord(state.u_count, 0.0, 0.0)


class RandomLegalPolicy:
    name = "random-legal"

    def begin_episode(self, instance, rng):
        return None

    def act(self, state, arrival, rng=None, mode=None, ctx=None):
        from matchlab.env import StepRecord, legal_mask

        legal = np.flatnonzero(legal_mask(state, arrival))
        return StepRecord(int(legal[rng.integers(len(legal))]), 0.0, 0.0)


def ReplayPolicy(instances, assignments):
    from matchlab.evaluation import ReplayPolicy as _ReplayPolicy

    return _ReplayPolicy(instances, assignments)


def coverage_objective(instance, decisions):
    """From-scratch coverage value of a decision sequence (telescoping oracle)."""
    per_user: dict[int, set[int]] = {}
    for arr, d in zip(instance.arrivals, decisions):
        if d is not None:
            per_user.setdefault(arr.user_id, set()).update(
                instance.payload.genres_per_u[d]
            )
    return sum(
        sum(instance.payload.user_weights[l][z] for z in gs)
        for l, gs in per_user.items()
    )
