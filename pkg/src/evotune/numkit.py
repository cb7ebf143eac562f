"""Minimal dense-network kernel: forward pass, exact backprop, Adam/SGD steps,
and a central finite-difference gradient oracle used by the test suite.

All functions are pure: parameters and optimizer state are returned as new
values, never mutated in place. Everything runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

Layer = tuple[np.ndarray, np.ndarray]  # (weights [out, in], bias [out])

_ACTIVATIONS = ("relu", "identity", "tanh")


@dataclass
class MlpParams:
    """Stacked affine layers with a hidden activation and an output activation."""

    layers: list[Layer]
    hidden_activation: str = "relu"
    output_activation: str = "identity"

    def __post_init__(self) -> None:
        if self.hidden_activation not in ("relu",):
            raise ValueError(f"unsupported hidden activation: {self.hidden_activation}")
        if self.output_activation not in ("identity", "tanh"):
            raise ValueError(f"unsupported output activation: {self.output_activation}")
        for k, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ValueError(f"layer {k}: weights {w.shape} and bias {b.shape} do not chain")
            if k > 0 and w.shape[1] != self.layers[k - 1][0].shape[0]:
                raise ValueError(f"layer {k}: input dim {w.shape[1]} does not match previous output")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise FloatingPointError(f"layer {k}: non-finite parameter entries")

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[0]


@dataclass
class ForwardCache:
    """Per-layer inputs and pre-activations from one forward pass."""

    inputs: list[np.ndarray]
    pre_activations: list[np.ndarray]


@dataclass
class AdamState:
    """First/second-moment accumulators plus step counter for one MlpParams."""

    m: list[Layer]
    v: list[Layer]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8


def init_mlp(
    rng: np.random.Generator,
    sizes: list[int],
    hidden_activation: str = "relu",
    output_activation: str = "identity",
    final_scale: float = 1.0,
) -> MlpParams:
    """Build an MLP with uniform [-1/sqrt(fan_in), 1/sqrt(fan_in)] init.

    ``final_scale`` shrinks the last layer (used to start actors near zero).
    """
    layers: list[Layer] = []
    for k in range(len(sizes) - 1):
        fan_in, fan_out = sizes[k], sizes[k + 1]
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = rng.uniform(-bound, bound, size=fan_out)
        if k == len(sizes) - 2:
            w = w * final_scale
            b = b * final_scale
        layers.append((w, b))
    return MlpParams(layers, hidden_activation, output_activation)


def zeros_like_params(params: MlpParams) -> list[Layer]:
    return [(np.zeros_like(w), np.zeros_like(b)) for w, b in params.layers]


def adam_init(params: MlpParams, beta1: float = 0.9, beta2: float = 0.999, eps_hat: float = 1e-8) -> AdamState:
    return AdamState(m=zeros_like_params(params), v=zeros_like_params(params),
                     step=0, beta1=beta1, beta2=beta2, eps_hat=eps_hat)


def _apply_output(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "tanh":
        return np.tanh(z)
    return z


def mlp_forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Run a batch through the net; the cache is sufficient for exact backprop."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ValueError(f"input shape {x.shape} does not match net input dim {params.in_dim}")
    inputs: list[np.ndarray] = []
    pre: list[np.ndarray] = []
    a = x
    last = len(params.layers) - 1
    for k, (w, b) in enumerate(params.layers):
        inputs.append(a)
        z = a @ w.T + b
        pre.append(z)
        if k < last:
            a = np.maximum(z, 0.0)
        else:
            a = _apply_output(z, params.output_activation)
    return a, ForwardCache(inputs=inputs, pre_activations=pre)


def mlp_backward(
    params: MlpParams, cache: ForwardCache, upstream_grad: np.ndarray
) -> tuple[list[Layer], np.ndarray]:
    """Exact gradients of sum(upstream_grad * output) w.r.t. params and input."""
    g = np.asarray(upstream_grad, dtype=np.float64)
    z_last = cache.pre_activations[-1]
    if g.shape != z_last.shape:
        raise ValueError(f"upstream grad shape {g.shape} does not match output {z_last.shape}")
    if params.output_activation == "tanh":
        d = g * (1.0 - np.tanh(z_last) ** 2)
    else:
        d = g
    grads: list[Layer] = [None] * len(params.layers)  # type: ignore[list-item]
    for k in range(len(params.layers) - 1, -1, -1):
        w, _ = params.layers[k]
        a_in = cache.inputs[k]
        grads[k] = (d.T @ a_in, d.sum(axis=0))
        d = d @ w
        if k > 0:
            d = d * (cache.pre_activations[k - 1] > 0.0)
    return grads, d


def adam_step(
    params: MlpParams, grads: list[Layer], state: AdamState, lr: float
) -> tuple[MlpParams, AdamState]:
    """One bias-corrected Adam update; returns fresh params and state."""
    if lr < 0:
        raise ValueError("learning rate must be >= 0")
    for dw, db in grads:
        if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(db))):
            raise FloatingPointError("non-finite gradients in adam_step")
    t = state.step + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    new_layers: list[Layer] = []
    new_m: list[Layer] = []
    new_v: list[Layer] = []
    for (w, b), (dw, db), (mw, mb), (vw, vb) in zip(params.layers, grads, state.m, state.v):
        mw2 = state.beta1 * mw + (1.0 - state.beta1) * dw
        mb2 = state.beta1 * mb + (1.0 - state.beta1) * db
        vw2 = state.beta2 * vw + (1.0 - state.beta2) * dw ** 2
        vb2 = state.beta2 * vb + (1.0 - state.beta2) * db ** 2
        w2 = w - lr * (mw2 / c1) / (np.sqrt(vw2 / c2) + state.eps_hat)
        b2 = b - lr * (mb2 / c1) / (np.sqrt(vb2 / c2) + state.eps_hat)
        new_layers.append((w2, b2))
        new_m.append((mw2, mb2))
        new_v.append((vw2, vb2))
    new_params = MlpParams(new_layers, params.hidden_activation, params.output_activation)
    new_state = AdamState(m=new_m, v=new_v, step=t,
                          beta1=state.beta1, beta2=state.beta2, eps_hat=state.eps_hat)
    return new_params, new_state


def sgd_step(params: MlpParams, grads: list[Layer], lr: float) -> MlpParams:
    """Plain gradient descent step (alternative optimizer)."""
    if lr < 0:
        raise ValueError("learning rate must be >= 0")
    new_layers = [(w - lr * dw, b - lr * db) for (w, b), (dw, db) in zip(params.layers, grads)]
    return MlpParams(new_layers, params.hidden_activation, params.output_activation)


def finite_diff_grad(
    f: Callable[[MlpParams], float], params: MlpParams, step: float
) -> list[Layer]:
    """Central-difference gradient estimate of a scalar function per parameter."""
    if step <= 0:
        raise ValueError("step must be > 0")
    out: list[Layer] = []
    for k, (w, b) in enumerate(params.layers):
        dw = np.zeros_like(w)
        db = np.zeros_like(b)
        for idx in np.ndindex(w.shape):
            orig = w[idx]
            w[idx] = orig + step
            hi = f(params)
            w[idx] = orig - step
            lo = f(params)
            w[idx] = orig
            dw[idx] = (hi - lo) / (2.0 * step)
        for i in range(b.shape[0]):
            orig = b[i]
            b[i] = orig + step
            hi = f(params)
            b[i] = orig - step
            lo = f(params)
            b[i] = orig
            db[i] = (hi - lo) / (2.0 * step)
        out.append((dw, db))
    return out


def max_rel_diff(grads_a: list[Layer], grads_b: list[Layer], abs_floor: float = 0.0) -> float:
    """Largest elementwise relative difference, denominator max(|a|, |b|, 1e-8).

    Entries whose absolute difference is at most ``abs_floor`` count as equal;
    finite-difference oracles resolve nothing below their roundoff noise
    (about |f|*eps/step for central differences), so comparisons against them
    pass that floor here."""
    worst = 0.0
    for (wa, ba), (wb, bb) in zip(grads_a, grads_b):
        for a, b in ((wa, wb), (ba, bb)):
            diff = np.abs(a - b)
            denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
            rel = np.where(diff <= abs_floor, 0.0, diff / denom)
            worst = max(worst, float(np.max(rel)))
    return worst


def fd_noise_floor(f_scale: float, step: float) -> float:
    """Conservative absolute error bound for a central finite difference of a
    float64 function with values of magnitude ``f_scale``."""
    return 8.0 * abs(f_scale) * np.finfo(np.float64).eps / step
