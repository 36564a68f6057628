"""Decision policies behind one interface: classical baselines and neural models.

Neural kinds and their fixed architectures (hidden layers of ReLU units):

* ff, ff-hist, ff-supervised: 3 x 100, one logit per slot, bound to the |U|
  they were built for;
* inv-ff, inv-ff-hist: 2 x 100 shared network applied per slot (one logit
  each), invariant to |U| and to fixed-node permutations.

Baselines: greedy (max current value), greedy-t (tuned threshold), greedy-rt
(randomized e^K threshold), msvv (bid scaled by 1 - e^(spent fraction - 1)).
All argmax ties break toward the lowest fixed-node index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import env, features, nn, serialize
from .graph_core import BipartiteInstance

NEURAL_KINDS = ("ff", "ff-hist", "inv-ff", "inv-ff-hist", "ff-supervised")
INVARIANT_KINDS = ("inv-ff", "inv-ff-hist")
BASELINE_KINDS = ("greedy", "greedy-t", "greedy-rt", "msvv")

HIDDEN_LAYERS = {
    "ff": (100, 100, 100),
    "ff-hist": (100, 100, 100),
    "ff-supervised": (100, 100, 100),
    "inv-ff": (100, 100),
    "inv-ff-hist": (100, 100),
}

SAMPLE = "sample"
GREEDY_DECODE = "greedy-decode"


class SizeMismatchError(ValueError):
    pass


class PolicyError(ValueError):
    pass


@dataclass
class PolicyModel:
    kind: str
    params: nn.MlpParams | None = None
    problem_kind: str | None = None  # neural kinds are built per problem
    u_count: int | None = None  # binding for non-invariant neural kinds
    w_t: float | None = None  # greedy-t threshold
    rt_scale: float | None = None  # greedy-rt weight multiplier
    rt_w_max: float | None = None  # greedy-rt max scaled weight
    decode_mode: str = GREEDY_DECODE

    @property
    def is_neural(self) -> bool:
        return self.kind in NEURAL_KINDS

    @property
    def invariant(self) -> bool:
        return self.kind in INVARIANT_KINDS

    @property
    def name(self) -> str:
        if self.kind == "greedy-t":
            return f"greedy-t({serialize.fmt_float(self.w_t)})"
        return self.kind

    def begin_episode(self, instance: BipartiteInstance, rng: np.random.Generator | None):
        if self.is_neural:
            if self.problem_kind != instance.kind:
                raise PolicyError(
                    f"{self.kind} policy built for {self.problem_kind!r} cannot run "
                    f"a {instance.kind!r} instance"
                )
            if not self.invariant and self.u_count != instance.u_count:
                raise SizeMismatchError(
                    f"{self.kind} policy is bound to |U|={self.u_count}, "
                    f"instance has |U|={instance.u_count}"
                )
        if self.kind == "msvv" and instance.kind != "adwords":
            raise PolicyError("msvv requires an adwords instance")
        if self.kind == "greedy-rt":
            if self.rt_w_max is None or self.rt_w_max <= 0:
                raise PolicyError("greedy-rt requires a positive w_max (fit it first)")
            k_max = math.ceil(math.log(self.rt_w_max + 1.0))
            k = int(rng.integers(k_max))
            return {"tau": math.exp(k)}
        return None

    def act(
        self,
        state: env.EpisodeState,
        arrival,
        rng: np.random.Generator | None = None,
        mode: str | None = None,
        ctx=None,
    ) -> env.StepRecord:
        env.begin_arrival(state, arrival)
        if self.is_neural:
            return self._act_neural(state, arrival, rng, mode or self.decode_mode)
        n = state.u_count
        vals = state.features.staged_vals
        legal = state.available[arrival.u_idx]
        if self.kind == "greedy":
            choice = _argmax_legal(arrival.u_idx, vals, legal)
        elif self.kind == "greedy-t":
            choice = _argmax_legal(arrival.u_idx, vals, legal & (vals >= self.w_t))
        elif self.kind == "msvv":
            budgets = np.asarray(state.payload.budgets)
            rem = state.problem_state.remaining[arrival.u_idx]
            spent_frac = (budgets[arrival.u_idx] - rem) / budgets[arrival.u_idx]
            score = arrival.weights * (1.0 - np.exp(spent_frac - 1.0))
            choice = _argmax_legal(arrival.u_idx, score, legal)
        elif self.kind == "greedy-rt":
            candidates = arrival.u_idx[legal & (vals * self.rt_scale >= ctx["tau"])]
            if len(candidates) == 0:
                choice = None
            else:
                choice = int(candidates[rng.integers(len(candidates))])
                logp = -math.log(len(candidates))
                return env.StepRecord(choice, logp, -logp)
        else:
            raise PolicyError(f"unknown policy kind {self.kind!r}")
        action = n if choice is None else choice
        return env.StepRecord(action, 0.0, 0.0)

    def _act_neural(self, state, arrival, rng, mode) -> env.StepRecord:
        inputs = features.assemble_input(self.kind, state, arrival, state.payload)
        logits, probs, mask = policy_distribution(self, state, arrival, inputs)
        if mode == SAMPLE:
            action = _sample_index(probs, rng)
        elif mode == GREEDY_DECODE:
            action = int(np.argmax(probs))
        else:
            raise PolicyError(f"unknown decode mode {mode!r}")
        return env.StepRecord(
            action=action,
            log_prob=float(np.log(probs[action])),
            entropy=nn.entropy_of(probs),
            inputs=inputs,
            mask=mask,
        )


def _argmax_legal(u_idx: np.ndarray, score: np.ndarray, allowed: np.ndarray) -> int | None:
    if not allowed.any():
        return None
    cand = np.flatnonzero(allowed)
    best = cand[np.argmax(score[cand])]  # first max = lowest u (u_idx sorted)
    return int(u_idx[best])


def _sample_index(probs: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(probs)
    i = int(np.searchsorted(cdf, rng.random(), side="right"))
    if i >= len(probs):  # guard against cdf[-1] < 1 from rounding
        i = int(np.flatnonzero(probs > 0)[-1])
    return i


def forward_logits(policy: PolicyModel, inputs: np.ndarray) -> tuple[np.ndarray, nn.Tape]:
    """Logits over u_count+1 slots; invariant kinds run the shared net per slot row."""
    out, tape = nn.forward(policy.params, inputs)
    if policy.invariant:
        return out[:, 0], tape
    return out, tape


def policy_distribution(policy, state, arrival, inputs=None):
    """(logits, probabilities, legal mask) for the staged arrival."""
    if inputs is None:
        inputs = features.assemble_input(policy.kind, state, arrival, state.payload)
    logits, _ = forward_logits(policy, inputs)
    mask = env.legal_mask(state, arrival)
    return logits, nn.masked_softmax(logits, mask), mask


def neural_act(
    policy: PolicyModel,
    state: env.EpisodeState,
    arrival,
    rng: np.random.Generator | None = None,
    mode: str | None = None,
) -> tuple[int, float, float]:
    """(action, exact log-probability, distribution entropy) for one decision."""
    rec = policy.act(state, arrival, rng=rng, mode=mode)
    return rec.action, rec.log_prob, rec.entropy


def make_policy(
    kind: str,
    problem_kind: str = "eobm",
    u_count: int | None = None,
    horizon: int | None = None,
    seed: int = 0,
    w_t: float | None = None,
    decode_mode: str = GREEDY_DECODE,
) -> PolicyModel:
    """Build a policy; neural kinds get seeded Glorot-initialized parameters."""
    if kind in BASELINE_KINDS:
        if kind == "greedy-t":
            if w_t is None:
                raise PolicyError("greedy-t needs a threshold (tune_threshold or w_t=)")
            return PolicyModel(kind=kind, w_t=float(w_t))
        return PolicyModel(kind=kind)
    if kind not in NEURAL_KINDS:
        raise PolicyError(f"unknown policy kind {kind!r}")
    invariant = kind in INVARIANT_KINDS
    if not invariant and u_count is None:
        raise PolicyError(f"{kind} requires u_count (it is size-bound)")
    dim = features.input_dim(kind, u_count if u_count is not None else 1, problem_kind)
    out_dim = 1 if invariant else u_count + 1
    dims = [dim, *HIDDEN_LAYERS[kind], out_dim]
    return PolicyModel(
        kind=kind,
        params=nn.init_params(dims, seed),
        problem_kind=problem_kind,
        u_count=None if invariant else u_count,
        decode_mode=decode_mode,
    )


def fit_greedy_rt(instances: list[BipartiteInstance], rule: str = "divide_min") -> PolicyModel:
    """Pre-scale weights so thresholds e^K apply: divide by the dataset minimum
    (synthetic weights in (0,1]) or multiply by the dataset maximum."""
    w_min = math.inf
    w_max = 0.0
    for inst in instances:
        for arr in inst.arrivals:
            w_min = min(w_min, float(arr.weights.min()))
            w_max = max(w_max, float(arr.weights.max()))
    if w_max <= 0:
        raise PolicyError("dataset has no positive weights")
    if rule == "divide_min":
        scale = 1.0 / w_min
    elif rule == "multiply_max":
        scale = w_max
    else:
        raise PolicyError(f"unknown greedy-rt scaling rule {rule!r}")
    return PolicyModel(kind="greedy-rt", rt_scale=scale, rt_w_max=w_max * scale)


THRESHOLD_GRID = tuple(j / 100.0 for j in range(1, 101))


def tune_threshold(instances: list[BipartiteInstance]) -> float:
    """Pick the threshold from the 0.01..1.00 grid with the best mean episode
    reward on the given instances; ties go to the smallest threshold."""
    if not instances:
        raise PolicyError("tune_threshold needs a non-empty dataset")
    best_w, best_reward = None, -math.inf
    for w in THRESHOLD_GRID:
        policy = PolicyModel(kind="greedy-t", w_t=w)
        total = 0.0
        for inst in instances:
            solution, _ = env.rollout(inst, policy)
            total += solution.objective_value
        mean = total / len(instances)
        if mean > best_reward + 1e-12:
            best_w, best_reward = w, mean
    return best_w


def save_policy(policy: PolicyModel, path: str, extra: dict | None = None) -> None:
    """Write a self-describing checkpoint (floats at 17 significant digits)."""
    obj: dict = {
        "format": "matchlab-policy",
        "kind": policy.kind,
        "decode": policy.decode_mode,
        "problem": policy.problem_kind,
        "u_count": policy.u_count,
        "w_t": policy.w_t,
        "rt_scale": policy.rt_scale,
        "rt_w_max": policy.rt_w_max,
    }
    if policy.params is not None:
        obj["dims"] = policy.params.dims
        obj["params"] = [
            {"w": w.ravel().tolist(), "b": b.tolist()} for w, b in policy.params.layers
        ]
    if extra is not None:
        obj["extra"] = extra
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(serialize.dumps(obj))
        f.write("\n")


def load_policy(path: str) -> tuple[PolicyModel, dict]:
    with open(path, "r", encoding="utf-8") as f:
        obj = serialize.loads(f.read())
    if obj.get("format") != "matchlab-policy":
        raise PolicyError(f"{path}: not a policy checkpoint")
    params = None
    if "params" in obj:
        dims = obj["dims"]
        layers = []
        for i, layer in enumerate(obj["params"]):
            w = np.array(layer["w"], dtype=np.float64).reshape(dims[i + 1], dims[i])
            layers.append((w, np.array(layer["b"], dtype=np.float64)))
        params = nn.MlpParams(layers)
    policy = PolicyModel(
        kind=obj["kind"],
        params=params,
        problem_kind=obj.get("problem"),
        u_count=obj.get("u_count"),
        w_t=obj.get("w_t"),
        rt_scale=obj.get("rt_scale"),
        rt_w_max=obj.get("rt_w_max"),
        decode_mode=obj.get("decode", GREEDY_DECODE),
    )
    return policy, obj.get("extra", {})
