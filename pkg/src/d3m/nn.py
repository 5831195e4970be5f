"""Dense ELU feature extractor with hand-written backprop, plus AdamW.

Everything is float64. Inputs are row-major batches of shape ``(batch, d_in)``.
The network is::

    h_0 = x
    h_1 = drop(elu(W_1 h_0 + b_1))
    h_l = h_{l-1} + drop(elu(W_l h_{l-1} + b_l))     l >= 2, when skip is on

so the first layer projects to the hidden width and every later layer is a
residual block of the same width.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ShapeError

Params = Dict[str, np.ndarray]


def elu(a):
    return np.where(a > 0, a, np.expm1(np.minimum(a, 0.0)))


def elu_grad(a):
    return np.where(a > 0, 1.0, np.exp(np.minimum(a, 0.0)))


def glorot_uniform(rng, fan_out, fan_in):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


@dataclass(frozen=True)
class FeatureExtractorParams:
    layers: Tuple[Tuple[np.ndarray, np.ndarray], ...]
    dropout_rate: float = 0.0
    skip_connections: bool = True

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if not self.layers:
            raise ValueError("feature extractor needs at least one layer")
        prev_out = None
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {i}: weight {w.shape} and bias {b.shape} do not match")
            if prev_out is not None and w.shape[1] != prev_out:
                raise ShapeError(f"layer {i} expects {w.shape[1]} inputs, previous layer gives {prev_out}")
            if self.skip_connections and i > 0 and w.shape[0] != w.shape[1]:
                raise ShapeError(f"layer {i}: skip connections need square hidden layers, got {w.shape}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i} has non-finite parameters")
            prev_out = w.shape[0]

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def num_hidden(self) -> int:
        return len(self.layers)

    def to_dict(self, prefix="fe") -> Params:
        out = {}
        for i, (w, b) in enumerate(self.layers):
            out[f"{prefix}.{i}.weight"] = w
            out[f"{prefix}.{i}.bias"] = b
        return out

    def with_arrays(self, arrays: Params, prefix="fe") -> "FeatureExtractorParams":
        layers = tuple(
            (arrays[f"{prefix}.{i}.weight"], arrays[f"{prefix}.{i}.bias"])
            for i in range(len(self.layers))
        )
        return replace(self, layers=layers)


def init_feature_extractor(rng, input_dim, hidden_dim, num_hidden, dropout_rate=0.0,
                           skip_connections=True) -> FeatureExtractorParams:
    layers = []
    fan_in = input_dim
    for _ in range(num_hidden):
        layers.append((glorot_uniform(rng, hidden_dim, fan_in), np.zeros(hidden_dim)))
        fan_in = hidden_dim
    return FeatureExtractorParams(tuple(layers), dropout_rate, skip_connections)


@dataclass
class ForwardCache:
    inputs: List[np.ndarray] = field(default_factory=list)
    preacts: List[np.ndarray] = field(default_factory=list)
    masks: List[Optional[np.ndarray]] = field(default_factory=list)


def draw_dropout_masks(params: FeatureExtractorParams, batch_size: int, rng):
    """Inverted-dropout masks (already scaled by 1/(1-p)), one per layer."""
    p = params.dropout_rate
    if p == 0.0:
        return [None] * params.num_hidden
    keep = 1.0 - p
    return [
        (rng.random((batch_size, w.shape[0])) < keep) / keep
        for w, _ in params.layers
    ]


def fe_forward(params: FeatureExtractorParams, x, train_mode=False, rng=None, masks=None,
               return_cache=False):
    """Features for a batch ``x``. Dropout is active only when ``train_mode``.

    ``masks`` overrides the random draw so a caller can replay the exact same
    dropout pattern (finite-difference checks rely on this).
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ShapeError(f"expected inputs with {params.input_dim} features, got shape {x.shape}")
    if train_mode and masks is None:
        if rng is None and params.dropout_rate > 0:
            raise ValueError("train_mode with dropout needs an rng")
        masks = draw_dropout_masks(params, x.shape[0], rng)
    if not train_mode:
        masks = [None] * params.num_hidden

    cache = ForwardCache()
    h = x
    for i, (w, b) in enumerate(params.layers):
        a = h @ w.T + b
        e = elu(a)
        if masks[i] is not None:
            e = e * masks[i]
        cache.inputs.append(h)
        cache.preacts.append(a)
        cache.masks.append(masks[i])
        h = h + e if (params.skip_connections and i > 0) else e
    if squeeze:
        h = h[0]
    if return_cache:
        return h, cache
    return h


def fe_backward(params: FeatureExtractorParams, cache: ForwardCache, dpsi) -> Params:
    """Gradients of a scalar loss w.r.t. every layer, given dL/dpsi."""
    grads = {}
    dh = dpsi
    for i in range(params.num_hidden - 1, -1, -1):
        w, _ = params.layers[i]
        de = dh if cache.masks[i] is None else dh * cache.masks[i]
        da = de * elu_grad(cache.preacts[i])
        grads[f"fe.{i}.weight"] = da.T @ cache.inputs[i]
        grads[f"fe.{i}.bias"] = da.sum(axis=0)
        dh_in = da @ w
        if params.skip_connections and i > 0:
            dh_in = dh_in + dh
        dh = dh_in
    return grads


@dataclass(frozen=True)
class OptimizerState:
    m: Params
    v: Params
    step: int = 0
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def init_adamw(params: Params, learning_rate=1e-3, weight_decay=1e-4, beta1=0.9, beta2=0.999,
               epsilon=1e-8) -> OptimizerState:
    zeros = {k: np.zeros_like(v) for k, v in params.items()}
    return OptimizerState(zeros, {k: np.zeros_like(v) for k, v in params.items()}, 0,
                          learning_rate, weight_decay, beta1, beta2, epsilon)


def adamw_step(params: Params, grads: Params, state: OptimizerState) -> Tuple[Params, OptimizerState]:
    """One decoupled-weight-decay Adam update. Returns fresh dicts; inputs are untouched."""
    if params.keys() != grads.keys() or params.keys() != state.m.keys():
        raise ShapeError("params, grads and optimizer state have different keys")
    t = state.step + 1
    b1, b2, lr = state.beta1, state.beta2, state.learning_rate
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeError(f"{k}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        p = p * (1.0 - lr * state.weight_decay)
        new_params[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        new_m[k] = m
        new_v[k] = v
    return new_params, replace(state, m=new_m, v=new_v, step=t)
