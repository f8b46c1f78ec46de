"""Dense feed-forward network with manual backprop and Adam.

All weights and biases live in one flat float64 vector, laid out layer-major
with weights (row-major, shape in x out) before biases. That flat vector is
the unit the federation layer averages, clips, and perturbs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from ._backend import kernels


class ShapeError(ValueError):
    """An array does not match the network layout."""


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths; first entry is the input dim, last the output dim.

    Hidden layers use ReLU, the output layer is linear.
    """

    layer_sizes: tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError("MlpSpec needs at least input and output layers")
        if any(s < 1 for s in sizes):
            raise ValueError(f"layer sizes must all be >= 1, got {sizes}")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_params(self) -> int:
        pairs = zip(self.layer_sizes, self.layer_sizes[1:])
        return sum(nin * nout + nout for nin, nout in pairs)

    def layers(self):
        """Yield (offset, fan_in, fan_out) per layer in flat-vector order."""
        off = 0
        for nin, nout in zip(self.layer_sizes, self.layer_sizes[1:]):
            yield off, nin, nout
            off += nin * nout + nout


def init_params(spec: MlpSpec, rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform weights, zero biases, drawn from the given stream."""
    parts = []
    for _, nin, nout in spec.layers():
        limit = math.sqrt(6.0 / (nin + nout))
        parts.append(rng.uniform(-limit, limit, size=nin * nout))
        parts.append(np.zeros(nout))
    return np.concatenate(parts)


def unflatten(spec: MlpSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views of the flat vector as per-layer (weights, bias) pairs."""
    params = _check_params(spec, params)
    out = []
    for off, nin, nout in spec.layers():
        w = params[off:off + nin * nout].reshape(nin, nout)
        b = params[off + nin * nout:off + nin * nout + nout]
        out.append((w, b))
    return out


def flatten(spec: MlpSpec, layers: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    parts = []
    for (w, b), (_, nin, nout) in zip(layers, spec.layers()):
        if w.shape != (nin, nout) or b.shape != (nout,):
            raise ShapeError(f"layer arrays {w.shape}/{b.shape} do not match ({nin},{nout})")
        parts.append(np.asarray(w, dtype=float).ravel())
        parts.append(np.asarray(b, dtype=float))
    return np.concatenate(parts)


def _check_params(spec: MlpSpec, params) -> np.ndarray:
    params = np.asarray(params, dtype=float).ravel()
    if params.shape[0] != spec.n_params:
        raise ShapeError(f"parameter vector has length {params.shape[0]}, "
                         f"spec {spec.layer_sizes} needs {spec.n_params}")
    return params


def _check_batch(spec: MlpSpec, x) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=float)
    if x.ndim != 2:
        raise ShapeError(f"batch must be 2-D, got shape {x.shape}")
    if x.shape[1] != spec.input_dim:
        raise ShapeError(f"batch has {x.shape[1]} columns but layer 0 expects "
                         f"{spec.input_dim}")
    return x


def forward(spec: MlpSpec, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Network output, one row per input row, spec.output_dim columns."""
    params = _check_params(spec, params)
    x = _check_batch(spec, x)
    return kernels.mlp_forward(spec.layer_sizes, params, x)


def forward_cached(spec: MlpSpec, params: np.ndarray, x: np.ndarray):
    """Like forward but also returns the hidden activations for backward."""
    params = _check_params(spec, params)
    x = _check_batch(spec, x)
    return kernels.mlp_forward_cached(spec.layer_sizes, params, x)


def backward_from_cache(spec: MlpSpec, params, x, hidden, dout) -> np.ndarray:
    dout = np.ascontiguousarray(dout, dtype=float)
    if dout.shape != (x.shape[0], spec.output_dim):
        raise ShapeError(f"upstream gradient shape {dout.shape} does not match "
                         f"output ({x.shape[0]}, {spec.output_dim})")
    return kernels.mlp_backward(spec.layer_sizes, params, x, hidden, dout)


def backward(spec: MlpSpec, params: np.ndarray, x: np.ndarray, dout: np.ndarray) -> np.ndarray:
    """d(sum(dout * forward(x))) / d(params), in the flat layout."""
    params = _check_params(spec, params)
    x = _check_batch(spec, x)
    _, hidden = kernels.mlp_forward_cached(spec.layer_sizes, params, x)
    return backward_from_cache(spec, params, x, hidden, dout)


@dataclass(frozen=True)
class AdamState:
    """Optimizer state; owned by exactly one training task at a time."""

    m: np.ndarray
    v: np.ndarray
    t: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, n_params: int, lr: float) -> "AdamState":
        return cls(m=np.zeros(n_params), v=np.zeros(n_params), t=0, lr=lr)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray):
    """One bias-corrected Adam update; returns (new params, new state)."""
    params = np.asarray(params, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if not (params.shape == grad.shape == state.m.shape == state.v.shape):
        raise ShapeError(f"length mismatch: params {params.shape}, grad {grad.shape}, "
                         f"state {state.m.shape}")
    t = state.t + 1
    p2, m2, v2 = kernels.adam_update(params, grad, state.m, state.v, t,
                                     state.lr, state.beta1, state.beta2, state.eps)
    return p2, replace(state, m=m2, v=v2, t=t)


def finite_difference_gradient(loss_fn: Callable[[np.ndarray], float],
                               params: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences per coordinate; the test oracle for every backward."""
    if step <= 0:
        raise ValueError("step must be positive")
    params = np.asarray(params, dtype=float)
    grad = np.empty_like(params)
    for i in range(params.size):
        p = params.copy()
        p[i] += step
        hi = loss_fn(p)
        p[i] -= 2.0 * step
        lo = loss_fn(p)
        grad[i] = (hi - lo) / (2.0 * step)
    return grad
