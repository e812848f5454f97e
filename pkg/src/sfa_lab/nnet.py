"""A small multilayer perceptron with hand-written backpropagation.

Parameters live in one flat float64 vector. For each layer, in order, the
weight matrix (shape ``fan_out x fan_in``, row-major) is followed by the bias
vector. Hidden layers use the configured activation; the output layer emits
raw logits.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionError, DomainError
from .params import as_vector, check_finite

ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise DomainError("an MLP needs at least an input and an output size")
        if min(sizes) < 1:
            raise DomainError(f"layer sizes must be positive, got {sizes}")
        if self.activation not in ACTIVATIONS:
            raise DomainError(f"unknown activation {self.activation!r}")

    @property
    def layers(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) per layer."""
        return list(zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    @property
    def num_params(self) -> int:
        return sum(fi * fo + fo for fi, fo in self.layers)

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]


@dataclass(frozen=True)
class ModelParams:
    spec: MlpSpec
    flat: np.ndarray

    def __post_init__(self):
        flat = as_vector(self.flat)
        if len(flat) != self.spec.num_params:
            raise DimensionError(
                f"spec {self.spec.layer_sizes} needs {self.spec.num_params} parameters, got {len(flat)}"
            )
        object.__setattr__(self, "flat", flat)

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Structured (W, b) views into the flat vector."""
        return unflatten(self.spec, self.flat)

    def with_flat(self, flat) -> "ModelParams":
        return ModelParams(self.spec, flat)


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(x) != len(y):
            raise DimensionError(f"{len(x)} input rows but {len(y)} labels")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return len(self.labels)


def unflatten(spec: MlpSpec, flat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    out, pos = [], 0
    for fan_in, fan_out in spec.layers:
        w = flat[pos:pos + fan_in * fan_out].reshape(fan_out, fan_in)
        pos += fan_in * fan_out
        b = flat[pos:pos + fan_out]
        pos += fan_out
        out.append((w, b))
    return out


def flatten(layers: Iterable[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    parts = []
    for w, b in layers:
        parts.append(np.asarray(w, dtype=np.float64).reshape(-1))
        parts.append(np.asarray(b, dtype=np.float64).reshape(-1))
    return np.concatenate(parts) if parts else np.zeros(0)


def init_params(spec: MlpSpec, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in spec.layers:
        s = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append((rng.uniform(-s, s, size=(fan_out, fan_in)), np.zeros(fan_out)))
    return ModelParams(spec, flatten(layers))


def _check_batch(params: ModelParams, batch) -> None:
    if batch.inputs.shape[1] != params.spec.input_dim:
        raise DimensionError(
            f"inputs have {batch.inputs.shape[1]} features, model expects {params.spec.input_dim}"
        )
    if len(batch.labels) and (batch.labels.min() < 0 or batch.labels.max() >= params.spec.num_classes):
        raise DimensionError("labels fall outside the model's class range")


def _activate(z, kind):
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _activation_grad(z, a, kind):
    return (z > 0).astype(np.float64) if kind == "relu" else 1.0 - a * a


def _forward_cache(params: ModelParams, x: np.ndarray):
    acts, pre = [x], []
    layers = params.layers()
    a = x
    for i, (w, b) in enumerate(layers):
        z = a @ w.T + b
        pre.append(z)
        a = z if i == len(layers) - 1 else _activate(z, params.spec.activation)
        acts.append(a)
    return acts, pre


def forward(params: ModelParams, batch) -> np.ndarray:
    """Logits, one row per input row."""
    _check_batch(params, batch)
    acts, _ = _forward_cache(params, batch.inputs)
    return acts[-1]


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True), z - np.log(e.sum(axis=1, keepdims=True))


def _backward(params: ModelParams, acts, pre, d_logits, square: bool = False):
    """Backpropagate per-row logit gradients.

    With ``square=False`` returns the summed parameter gradient. With
    ``square=True`` returns the sum over rows of the squared per-row gradient.
    """
    layers = params.layers()
    kind = params.spec.activation
    grads = []
    dz = d_logits
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        a_prev = acts[i]
        if square:
            grads.append(((dz * dz).T @ (a_prev * a_prev), (dz * dz).sum(axis=0)))
        else:
            grads.append((dz.T @ a_prev, dz.sum(axis=0)))
        if i > 0:
            da = dz @ w
            dz = da * _activation_grad(pre[i - 1], acts[i], kind)
    return flatten(reversed(grads))


def loss_and_grad(params: ModelParams, batch) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the batch and its exact gradient."""
    if len(batch.labels) == 0:
        raise DomainError("cannot compute a loss on an empty batch")
    _check_batch(params, batch)
    n = len(batch.labels)
    acts, pre = _forward_cache(params, batch.inputs)
    probs, log_probs = _softmax(acts[-1])
    rows = np.arange(n)
    loss = -log_probs[rows, batch.labels].mean()
    d_logits = probs
    d_logits[rows, batch.labels] -= 1.0
    d_logits /= n
    return float(loss), check_finite(_backward(params, acts, pre, d_logits), "gradient")


def predict(params: ModelParams, batch, allowed: Sequence[int] | None = None) -> np.ndarray:
    """Argmax class per row, optionally restricted to ``allowed`` classes.

    Ties resolve to the lowest class index.
    """
    logits = forward(params, batch)
    if allowed is not None:
        mask = np.full(logits.shape[1], -np.inf)
        mask[np.asarray(sorted(allowed), dtype=np.int64)] = 0.0
        logits = logits + mask
    return np.argmax(logits, axis=1)


def accuracy(params: ModelParams, data, allowed: Sequence[int] | None = None) -> float:
    if len(data.labels) == 0:
        raise DomainError("accuracy of an empty dataset is undefined")
    return float(np.mean(predict(params, data, allowed) == data.labels))


def fisher_diagonal(params: ModelParams, data, n_samples: int | None = None, seed: int = 0,
                    chunk: int = 1024) -> np.ndarray:
    """Empirical diagonal Fisher information.

    Mean over sampled examples of the squared gradient of ``log p(label | x)``.
    Examples are drawn without replacement when ``n_samples`` does not exceed
    the dataset size; ``None`` uses every example.
    """
    n = len(data.labels)
    if n == 0:
        raise DomainError("cannot estimate Fisher information on an empty dataset")
    if n_samples is None:
        n_samples = n
    if n_samples <= 0:
        raise DomainError(f"n_samples must be positive, got {n_samples}")
    _check_batch(params, data)
    if n_samples == n:
        idx = np.arange(n)
    else:
        rng = np.random.default_rng(seed)
        idx = np.sort(rng.choice(n, size=n_samples, replace=n_samples > n))

    total = np.zeros(params.spec.num_params)
    for start in range(0, len(idx), chunk):
        sel = idx[start:start + chunk]
        x, y = data.inputs[sel], data.labels[sel]
        acts, pre = _forward_cache(params, x)
        probs, _ = _softmax(acts[-1])
        probs[np.arange(len(y)), y] -= 1.0
        total += _backward(params, acts, pre, probs, square=True)
    return check_finite(total / len(idx), "Fisher diagonal")
