"""Per-episode feature accumulators and model input assembly.

Conventions (shared by every model input):

* vectors are indexed by fixed node 0..u_count-1 with one extra skip slot last;
* the skip slot has weight 0, availability 1, and zeroed node statistics;
* weight-valued entries are divided by the running maximum value observed in
  the episode (variances by its square) so every feature stays in a bounded
  range regardless of graph size; 0/0 cases evaluate to 0.

Weight statistics per fixed node cover arrivals strictly before the current
one; the average-degree feature includes the current arrival.
"""

from __future__ import annotations

import numpy as np

INPUT_KINDS = ("ff", "ff-hist", "inv-ff", "inv-ff-hist")

# ff-supervised shares ff-hist's network and input assembly
def assembly_kind(kind: str) -> str:
    return "ff-hist" if kind == "ff-supervised" else kind


class FeatureState:
    """Incremental statistics over one episode; owned by one EpisodeState."""

    def __init__(self, u_count: int, horizon: int):
        self.u_count = u_count
        self.horizon = horizon
        self.completed = 0  # arrivals fully processed
        self.deg = np.zeros(u_count, dtype=np.int64)
        self.sum_w = np.zeros(u_count)
        self.sumsq_w = np.zeros(u_count)
        self.m_count = 0
        self.m_sum = 0.0
        self.m_sumsq = 0.0
        self.m_max = 0.0
        self.m_min = 0.0
        self.skip_count = 0
        self.running_max = 0.0
        self.staged = False
        self.staged_u: np.ndarray | None = None
        self.staged_vals: np.ndarray | None = None

    @property
    def t_now(self) -> int:
        """1-based index of the arrival being decided (= completed count at terminal)."""
        return self.completed + (1 if self.staged else 0)

    def observe(self, u_idx: np.ndarray, values: np.ndarray) -> None:
        """Stage the current arrival's edges before the decision is made."""
        if self.staged:
            raise RuntimeError("previous arrival not committed")
        self.staged = True
        self.staged_u = u_idx
        self.staged_vals = values
        if len(values):
            self.running_max = max(self.running_max, float(values.max()))

    def commit(self, action: int, value: float) -> None:
        """Fold the staged arrival and the decision into the accumulators."""
        if not self.staged:
            raise RuntimeError("no staged arrival to commit")
        if action == self.u_count:
            self.skip_count += 1
        else:
            v = float(value)
            self.m_max = v if self.m_count == 0 else max(self.m_max, v)
            self.m_min = v if self.m_count == 0 else min(self.m_min, v)
            self.m_count += 1
            self.m_sum += v
            self.m_sumsq += v * v
        self.deg[self.staged_u] += 1
        self.sum_w[self.staged_u] += self.staged_vals
        self.sumsq_w[self.staged_u] += self.staged_vals**2
        self.completed += 1
        self.staged = False
        self.staged_u = None
        self.staged_vals = None


def graph_features(fs: FeatureState) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per fixed node: mean weight, weight variance (strictly past arrivals), and
    average degree including the current arrival. Skip slot entries are 0."""
    n = fs.u_count
    mu = np.zeros(n + 1)
    var = np.zeros(n + 1)
    deg = np.zeros(n + 1)
    seen = fs.deg > 0
    mu[:n][seen] = fs.sum_w[seen] / fs.deg[seen]
    var[:n][seen] = np.maximum(fs.sumsq_w[seen] / fs.deg[seen] - mu[:n][seen] ** 2, 0.0)
    t = fs.t_now
    if t > 0:
        incident = fs.deg.astype(np.float64)
        if fs.staged:
            incident[fs.staged_u] += 1
        deg[:n] = incident / t
    return mu, var, deg


def node_features(fs: FeatureState, arrival) -> tuple[float, float]:
    """(fraction of fixed nodes incident to the arrival, normalized step index)."""
    pct = len(arrival.edges) / fs.u_count
    step = fs.t_now / fs.horizon
    return pct, step


def solution_features(fs: FeatureState) -> np.ndarray:
    """(max, min, mean, var of matched values, matched ratio, skip ratio, p_t)."""
    out = np.zeros(7)
    if fs.m_count:
        mean = fs.m_sum / fs.m_count
        out[0] = fs.m_max
        out[1] = fs.m_min
        out[2] = mean
        out[3] = max(fs.m_sumsq / fs.m_count - mean * mean, 0.0)
    out[4] = fs.m_count / fs.u_count
    t = fs.t_now
    out[5] = fs.skip_count / t if t else 0.0
    out[6] = fs.m_sum / fs.u_count
    return out


def input_dim(kind: str, u_count: int, problem_kind: str) -> int:
    """Length of the assembled input (per slot for invariant kinds)."""
    kind = assembly_kind(kind)
    n1 = u_count + 1
    adwords = problem_kind == "adwords"
    if kind == "ff":
        return 2 * n1 + (n1 if adwords else 0)
    if kind == "ff-hist":
        return 5 * n1 + 9 + (2 * n1 if adwords else 0)
    if kind == "inv-ff":
        return 3 + (1 if adwords else 0)
    if kind == "inv-ff-hist":
        return 16 + (2 if adwords else 0)
    raise ValueError(f"unknown input kind {kind!r}")


def assemble_input(kind, state, arrival, payload, normalize: bool = True) -> np.ndarray:
    """Build the model input for the staged arrival.

    Returns a single vector for ff kinds and a (u_count+1, dim) matrix of
    per-slot rows for invariant kinds.
    """
    kind = assembly_kind(kind)
    fs: FeatureState = state.features
    if not fs.staged:
        raise RuntimeError("assemble_input requires a staged arrival (call begin_arrival)")
    n = fs.u_count
    n1 = n + 1

    w = np.zeros(n1)
    w[fs.staged_u] = fs.staged_vals
    m = np.ones(n1)
    m[:n] = state.available.astype(np.float64)
    w_mean = float(fs.staged_vals.mean()) if len(fs.staged_vals) else 0.0

    M = fs.running_max if normalize else 1.0
    inv = 1.0 / M if M > 0 else 0.0
    inv2 = inv * inv

    adwords = payload.kind == "adwords"
    if adwords:
        budgets = np.asarray(payload.budgets, dtype=np.float64)
        b_max = float(budgets.max())
        b_inv = (1.0 / b_max if b_max > 0 else 0.0) if normalize else 1.0
        r_full = np.zeros(n1)
        r_full[:n] = state.problem_state.remaining * b_inv
        b_full = np.zeros(n1)
        b_full[:n] = budgets * b_inv

    if kind == "ff":
        parts = [w * inv, m]
        if adwords:
            parts.append(r_full)
        return np.concatenate(parts)

    if kind == "ff-hist":
        mu, var, deg = graph_features(fs)
        h = solution_features(fs)
        h_n = h.copy()
        h_n[[0, 1, 2, 6]] *= inv
        h_n[3] *= inv2
        n_t = np.array(node_features(fs, arrival))
        parts = [w * inv, m, h_n, mu * inv, var * inv2, deg, n_t]
        if adwords:
            parts.extend([r_full, b_full])
        return np.concatenate(parts)

    s = np.zeros(n1)
    s[n] = 1.0

    if kind == "inv-ff":
        cols = [w * inv, s, np.full(n1, w_mean * inv)]
        if adwords:
            cols.append(r_full)
        return np.stack(cols, axis=1)

    if kind == "inv-ff-hist":
        mu, var, deg = graph_features(fs)
        h = solution_features(fs)
        h_n = h.copy()
        h_n[[0, 1, 2, 6]] *= inv
        h_n[3] *= inv2
        pct, step = node_features(fs, arrival)
        cols = [
            w * inv,
            m,
            s,
            np.full(n1, w_mean * inv),
            np.full(n1, pct),
            np.full(n1, step),
            mu * inv,
            var * inv2,
            deg,
        ]
        rows = np.stack(cols, axis=1)
        rows = np.concatenate([rows, np.tile(h_n, (n1, 1))], axis=1)
        if adwords:
            rows = np.concatenate([rows, r_full[:, None], b_full[:, None]], axis=1)
        return rows

    raise ValueError(f"unknown input kind {kind!r}")
