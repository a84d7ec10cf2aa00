"""Dense ReLU network on a flat float64 parameter vector.

Parameters are stored as one 1-D array so that every federated operation
(averaging, regularizers, communication metering) works on plain vectors.
Layout, layer by layer: weight matrix (fan_in x fan_out, row-major), bias,
and after the first hidden layer (when enabled) the norm scale and shift.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


@dataclass(frozen=True)
class ModelSpec:
    layer_sizes: tuple[int, ...]
    has_norm_layer: bool = False

    def __post_init__(self) -> None:
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2:
            raise ValueError("layer_sizes needs at least an input and an output size")
        if any(s < 1 for s in sizes):
            raise ValueError(f"layer sizes must be >= 1, got {sizes}")
        if self.has_norm_layer and len(sizes) < 3:
            raise ValueError("a norm layer needs at least one hidden layer")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_params(self) -> int:
        d = sum(a * b + b for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))
        if self.has_norm_layer:
            d += 2 * self.layer_sizes[1]
        return d


@dataclass
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D array")
        if len(self.labels) != len(self.features):
            raise ValueError("features and labels differ in length")
        if len(self.labels) == 0:
            raise ValueError("a batch needs at least one sample")
        if self.labels.min() < 0:
            raise ValueError("labels must be non-negative")


@dataclass(frozen=True)
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    scale: np.ndarray | None = None
    shift: np.ndarray | None = None


def unflatten(params: np.ndarray, spec: ModelSpec) -> list[Layer]:
    """Split a flat vector into per-layer views (no copies)."""
    params = np.asarray(params)
    if params.shape != (spec.n_params,):
        raise ValueError(f"expected {spec.n_params} parameters, got shape {params.shape}")
    layers = []
    pos = 0
    for i, (fan_in, fan_out) in enumerate(zip(spec.layer_sizes[:-1], spec.layer_sizes[1:])):
        w = params[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        b = params[pos:pos + fan_out]
        pos += fan_out
        scale = shift = None
        if i == 0 and spec.has_norm_layer:
            scale = params[pos:pos + fan_out]
            pos += fan_out
            shift = params[pos:pos + fan_out]
            pos += fan_out
        layers.append(Layer(w, b, scale, shift))
    return layers


def flatten(layers: Sequence[Layer]) -> np.ndarray:
    parts = []
    for layer in layers:
        parts.append(np.asarray(layer.weight, dtype=np.float64).ravel())
        parts.append(np.asarray(layer.bias, dtype=np.float64).ravel())
        if layer.scale is not None:
            parts.append(np.asarray(layer.scale, dtype=np.float64).ravel())
            parts.append(np.asarray(layer.shift, dtype=np.float64).ravel())
    return np.concatenate(parts)


def init_model(spec: ModelSpec, seed: int) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, identity norm."""
    rng = np.random.default_rng(seed)
    params = np.zeros(spec.n_params)
    for layer in unflatten(params, spec):
        fan_in = layer.weight.shape[0]
        bound = 1.0 / np.sqrt(fan_in)
        layer.weight[...] = rng.uniform(-bound, bound, size=layer.weight.shape)
        if layer.scale is not None:
            layer.scale[...] = 1.0
    return params


def norm_layer_mask(spec: ModelSpec) -> np.ndarray:
    """Boolean mask over parameters; False marks the norm scale/shift entries."""
    mask = np.ones(spec.n_params, dtype=bool)
    if spec.has_norm_layer:
        h = spec.layer_sizes[1]
        start = spec.layer_sizes[0] * h + h
        mask[start:start + 2 * h] = False
    return mask


def _check_inputs(params, batch, spec: ModelSpec) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(batch.features, dtype=np.float64)
    y = np.asarray(batch.labels, dtype=np.int64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"features must have shape (n, {spec.input_dim}), got {x.shape}")
    if len(y) != len(x) or len(y) == 0:
        raise ValueError("batch must hold at least one sample with one label each")
    if y.min() < 0 or y.max() >= spec.n_classes:
        raise ValueError(f"labels must lie in [0, {spec.n_classes})")
    return x, y


def _forward(layers: list[Layer], x: np.ndarray):
    # caches per layer: (layer input, pre-norm affine output or None, pre-activation)
    caches = []
    h = x
    last = len(layers) - 1
    for i, layer in enumerate(layers):
        a = h @ layer.weight + layer.bias
        pre_norm = None
        if layer.scale is not None:
            pre_norm = a
            a = a * layer.scale + layer.shift
        caches.append((h, pre_norm, a))
        h = a if i == last else np.maximum(a, 0.0)
    return h, caches


def logits(params: np.ndarray, features: np.ndarray, spec: ModelSpec) -> np.ndarray:
    out, _ = _forward(unflatten(params, spec), np.asarray(features, dtype=np.float64))
    return out


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _per_sample_terms(params, batch, spec):
    """Forward pass plus per-sample backward signals.

    Returns the per-sample losses and, for every parameter block in layout
    order, a pair (left, right) such that the per-sample gradient of that
    block is left[i] (outer) right[i] for weights, or right[i] (times left[i]
    when left is not None) for vector blocks.
    """
    x, y = _check_inputs(params, batch, spec)
    layers = unflatten(params, spec)
    out, caches = _forward(layers, x)
    logp = _log_softmax(out)
    n = len(y)
    losses = -logp[np.arange(n), y]

    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0  # d loss_i / d logits_i
    blocks = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        h_in, pre_norm, a = caches[i]
        layer = layers[i]
        if i != len(layers) - 1:
            delta = delta * (a > 0.0)
        if layer.scale is not None:
            norm_blocks = (pre_norm, delta)
            delta = delta * layer.scale
        else:
            norm_blocks = None
        blocks[i] = (h_in, delta, norm_blocks)
        if i > 0:
            delta = delta @ layer.weight.T
    return losses, blocks


def loss_and_grad(params: np.ndarray, batch, spec: ModelSpec) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the batch and its exact gradient."""
    losses, blocks = _per_sample_terms(params, batch, spec)
    n = len(losses)
    parts = []
    for h_in, delta, norm_blocks in blocks:
        parts.append((h_in.T @ delta).ravel() / n)
        parts.append(delta.sum(axis=0) / n)
        if norm_blocks is not None:
            pre_norm, d_out = norm_blocks
            parts.append((pre_norm * d_out).sum(axis=0) / n)
            parts.append(d_out.sum(axis=0) / n)
    return float(losses.mean()), np.concatenate(parts)


def mean_squared_sample_grad(params: np.ndarray, batch, spec: ModelSpec) -> np.ndarray:
    """Per-coordinate mean over samples of the squared per-sample gradient."""
    losses, blocks = _per_sample_terms(params, batch, spec)
    n = len(losses)
    parts = []
    for h_in, delta, norm_blocks in blocks:
        # (h_i delta_i^T)^2 summed over i == (h^2)^T (delta^2)
        parts.append(((h_in ** 2).T @ (delta ** 2)).ravel() / n)
        parts.append((delta ** 2).sum(axis=0) / n)
        if norm_blocks is not None:
            pre_norm, d_out = norm_blocks
            parts.append(((pre_norm * d_out) ** 2).sum(axis=0) / n)
            parts.append((d_out ** 2).sum(axis=0) / n)
    return np.concatenate(parts)


def loss(params: np.ndarray, batch, spec: ModelSpec) -> float:
    x, y = _check_inputs(params, batch, spec)
    out, _ = _forward(unflatten(params, spec), x)
    return float(-_log_softmax(out)[np.arange(len(y)), y].mean())


def central_difference(fn: Callable[[np.ndarray], float], x: np.ndarray, step: float) -> np.ndarray:
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + step
        up = fn(x)
        x[i] = orig - step
        down = fn(x)
        x[i] = orig
        grad[i] = (up - down) / (2.0 * step)
    return grad


def finite_diff_grad(params, batch, spec: ModelSpec, step: float = 1e-5,
                     loss_fn: Callable[[np.ndarray], float] | None = None) -> np.ndarray:
    """Coordinate-wise central-difference gradient of the batch loss.

    ``loss_fn`` replaces the network loss when given, which lets tests check
    the differencing itself against a function with a known gradient.
    """
    if loss_fn is None:
        def loss_fn(p):
            return loss(p, batch, spec)
    return central_difference(loss_fn, params, step)


def evaluate(params: np.ndarray, dataset, spec: ModelSpec) -> float:
    """Fraction of samples whose argmax logit (lowest index on ties) matches the label."""
    x = np.asarray(dataset.features, dtype=np.float64)
    y = np.asarray(dataset.labels)
    if len(y) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pred = np.argmax(logits(params, x, spec), axis=1)
    return float(np.mean(pred == y))
