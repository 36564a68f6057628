"""Minimal dense-network stack: forward/backward, masked softmax, Adam.

Everything is float64 numpy with fixed summation order, so results are
bit-deterministic for fixed inputs. Hidden layers use ReLU (subgradient 0 at
0), the output layer is linear. forward() accepts a single vector or a matrix
of row vectors; backward() returns exact reverse-mode gradients of a scalar
loss given its gradient with respect to the output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class MlpParams:
    layers: list[tuple[np.ndarray, np.ndarray]]  # (weight out x in, bias out)

    @property
    def dims(self) -> list[int]:
        return [self.layers[0][0].shape[1]] + [w.shape[0] for w, _ in self.layers]

    def copy(self) -> "MlpParams":
        return MlpParams([(w.copy(), b.copy()) for w, b in self.layers])


@dataclass
class AdamState:
    alpha: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    v: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    @classmethod
    def create(cls, params: MlpParams, alpha: float, **kw) -> "AdamState":
        zeros = lambda: [(np.zeros_like(w), np.zeros_like(b)) for w, b in params.layers]
        return cls(alpha=alpha, m=zeros(), v=zeros(), **kw)


@dataclass
class Tape:
    activations: list[np.ndarray]  # input to each layer, 2-D
    preacts: list[np.ndarray]  # pre-activation of each layer, 2-D
    squeezed: bool  # input was 1-D


def init_params(dims: list[int], seed: int) -> MlpParams:
    """Glorot-uniform weights, zero biases, deterministic per seed."""
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ValueError(f"invalid layer dims {dims}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        layers.append((w, np.zeros(fan_out)))
    return MlpParams(layers)


def forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, Tape]:
    x = np.asarray(x, dtype=np.float64)
    squeezed = x.ndim == 1
    a = x[None, :] if squeezed else x
    if a.shape[1] != params.layers[0][0].shape[1]:
        raise ValueError(
            f"input dim {a.shape[1]} != first layer in-dim {params.layers[0][0].shape[1]}"
        )
    activations, preacts = [], []
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        activations.append(a)
        z = a @ w.T + b
        preacts.append(z)
        a = z if i == last else np.maximum(z, 0.0)
    out = a[0] if squeezed else a
    return out, Tape(activations, preacts, squeezed)


def backward(params: MlpParams, tape: Tape, dout: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Gradient of the loss w.r.t. every (weight, bias), given dloss/doutput."""
    dout = np.asarray(dout, dtype=np.float64)
    dz = dout[None, :] if tape.squeezed else dout
    if dz.shape != tape.preacts[-1].shape:
        raise ValueError(f"upstream gradient shape {dz.shape} != output {tape.preacts[-1].shape}")
    grads: list[tuple[np.ndarray, np.ndarray] | None] = [None] * len(params.layers)
    for i in range(len(params.layers) - 1, -1, -1):
        a = tape.activations[i]
        grads[i] = (dz.T @ a, dz.sum(axis=0))
        if i > 0:
            da = dz @ params.layers[i][0]
            dz = da * (tape.preacts[i - 1] > 0)
    return grads  # type: ignore[return-value]


def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax over legal slots; illegal slots get probability exactly 0."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("masked_softmax: no legal slot")
    probs = np.zeros_like(logits, dtype=np.float64)
    legal = logits[mask]
    e = np.exp(legal - legal.max())
    probs[mask] = e / e.sum()
    return probs


def masked_softmax_rows(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise masked softmax for a (n, k) logit matrix."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=1).all():
        raise ValueError("masked_softmax: a row has no legal slot")
    shifted = np.where(mask, logits, -np.inf)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def entropy_of(probs: np.ndarray) -> float:
    p = probs[probs > 0]
    return float(-(p * np.log(p)).sum())


def adam_step(params: MlpParams, grads, state: AdamState) -> MlpParams:
    """Standard bias-corrected Adam update, in place."""
    for i, (gw, gb) in enumerate(grads):
        if not (np.isfinite(gw).all() and np.isfinite(gb).all()):
            raise ValueError(f"non-finite gradient in layer {i}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for i, (gw, gb) in enumerate(grads):
        w, b = params.layers[i]
        mw, mb = state.m[i]
        vw, vb = state.v[i]
        mw *= state.beta1
        mw += (1 - state.beta1) * gw
        mb *= state.beta1
        mb += (1 - state.beta1) * gb
        vw *= state.beta2
        vw += (1 - state.beta2) * gw**2
        vb *= state.beta2
        vb += (1 - state.beta2) * gb**2
        w -= state.alpha * (mw / c1) / (np.sqrt(vw / c2) + state.eps)
        b -= state.alpha * (mb / c1) / (np.sqrt(vb / c2) + state.eps)
    return params


def accumulate_grads(total, grads, scale: float = 1.0):
    """Sum gradient lists in place (fixed order for determinism)."""
    if total is None:
        return [(gw * scale, gb * scale) for gw, gb in grads]
    for (tw, tb), (gw, gb) in zip(total, grads):
        tw += scale * gw
        tb += scale * gb
    return total


def flatten_params(params: MlpParams) -> np.ndarray:
    return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in params.layers])


def set_flat_params(params: MlpParams, flat: np.ndarray) -> None:
    pos = 0
    for w, b in params.layers:
        w[...] = flat[pos : pos + w.size].reshape(w.shape)
        pos += w.size
        b[...] = flat[pos : pos + b.size]
        pos += b.size
    if pos != len(flat):
        raise ValueError("flat vector length does not match parameter count")
