"""Small dense ReLU networks trained with plain SGD.

Parameters live in a single flat float64 vector (:class:`ParamVector`)
so that federated updates, clipping and noise can treat a model as one
point in R^d.  Layer ``j`` owns a ``(rows, cols) = (fan_out, fan_in)``
weight block followed by a ``rows``-long bias block.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

TASKS = ("classification", "regression")


class ShapeError(ValueError):
    """Inputs or parameters do not fit the model layout."""


class NonFiniteGradientError(ArithmeticError):
    def __init__(self, layer: int):
        super().__init__(f"non-finite gradient in layer {layer}")
        self.layer = layer


@dataclass(frozen=True)
class ModelSpec:
    layer_sizes: tuple[int, ...]
    task: str = "classification"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError("a model needs at least an input and an output layer")
        if any(s <= 0 for s in sizes):
            raise ValueError(f"layer sizes must be positive, got {sizes}")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.task == "classification" and sizes[-1] < 2:
            raise ValueError("classification needs at least two output classes")

    @property
    def shapes(self) -> tuple[tuple[int, int], ...]:
        return tuple(zip(self.layer_sizes[1:], self.layer_sizes[:-1]))

    @property
    def n_params(self) -> int:
        return sum(r * c + r for r, c in self.shapes)

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat, read-only parameter vector plus its layer shapes."""

    values: np.ndarray
    shapes: tuple[tuple[int, int], ...] = field(default=())

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64, copy=True).ravel()
        vals.flags.writeable = False
        shapes = tuple((int(r), int(c)) for r, c in self.shapes)
        expected = sum(r * c + r for r, c in shapes)
        if shapes and expected != vals.size:
            raise ShapeError(f"{vals.size} values do not match layer shapes {shapes}")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "shapes", shapes)

    def __len__(self) -> int:
        return self.values.size

    def __eq__(self, other):
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.shapes == other.shapes and np.array_equal(self.values, other.values)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.shapes)

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(weight, bias) views per layer; read-only."""
        out, pos = [], 0
        for rows, cols in self.shapes:
            w = self.values[pos:pos + rows * cols].reshape(rows, cols)
            pos += rows * cols
            b = self.values[pos:pos + rows]
            pos += rows
            out.append((w, b))
        return out

    @classmethod
    def from_layers(cls, layers: Sequence[tuple[np.ndarray, np.ndarray]]) -> "ParamVector":
        shapes = tuple(np.shape(w) for w, _ in layers)
        flat = np.concatenate([np.concatenate([np.ravel(w), np.ravel(b)]) for w, b in layers])
        return cls(flat, shapes)


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        if len(self.inputs) != len(self.targets):
            raise ShapeError(
                f"{len(self.inputs)} input rows but {len(self.targets)} targets"
            )

    def __len__(self) -> int:
        return len(self.targets)


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ParamVector:
    """Glorot-uniform weights, zero biases."""
    layers = []
    for rows, cols in spec.shapes:
        limit = np.sqrt(6.0 / (rows + cols))
        layers.append((rng.uniform(-limit, limit, size=(rows, cols)), np.zeros(rows)))
    return ParamVector.from_layers(layers)


def _check(spec: ModelSpec, params: ParamVector, inputs: np.ndarray) -> np.ndarray:
    if params.shapes != spec.shapes:
        raise ShapeError(f"parameter shapes {params.shapes} do not match spec {spec.shapes}")
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(f"expected inputs of shape (n, {spec.input_dim}), got {x.shape}")
    return x


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _forward_cache(spec, params, x):
    acts = [x]
    layers = params.layers()
    for j, (w, b) in enumerate(layers):
        z = acts[-1] @ w.T + b
        if j < len(layers) - 1:
            z = np.maximum(z, 0.0)
        acts.append(z)
    return acts, layers


def forward(spec: ModelSpec, params: ParamVector, inputs: np.ndarray) -> np.ndarray:
    """Log-probabilities for classification, raw outputs for regression."""
    x = _check(spec, params, inputs)
    acts, _ = _forward_cache(spec, params, x)
    out = acts[-1]
    return log_softmax(out) if spec.task == "classification" else out


def _regression_targets(targets, n_out):
    t = np.asarray(targets, dtype=np.float64)
    return t.reshape(-1, n_out)


def compute_loss(outputs: np.ndarray, targets: np.ndarray, task: str) -> float:
    """Mean NLL of log-probabilities, or mean squared error over all entries."""
    outputs = np.asarray(outputs, dtype=np.float64)
    n = len(outputs)
    if n == 0:
        raise ValueError("cannot compute a loss on an empty batch")
    if len(targets) != n:
        raise ShapeError(f"{n} outputs but {len(targets)} targets")
    if task == "classification":
        labels = np.asarray(targets, dtype=np.int64)
        return float(-outputs[np.arange(n), labels].mean())
    if task == "regression":
        t = _regression_targets(targets, outputs.shape[1])
        return float(np.mean((outputs - t) ** 2))
    raise ValueError(f"unknown task {task!r}")


def loss_and_gradient(
    spec: ModelSpec, params: ParamVector, batch: Batch
) -> tuple[float, ParamVector]:
    """Batch loss and its gradient by backpropagation."""
    # overflow is caught by the finiteness check below, so numpy need not warn
    with np.errstate(over="ignore", invalid="ignore"):
        return _loss_and_gradient(spec, params, batch)


def _loss_and_gradient(spec: ModelSpec, params: ParamVector, batch: Batch) -> tuple[float, ParamVector]:
    x = _check(spec, params, batch.inputs)
    n = len(x)
    if n == 0:
        raise ValueError("cannot compute a loss on an empty batch")
    acts, layers = _forward_cache(spec, params, x)
    out = acts[-1]
    if spec.task == "classification":
        logp = log_softmax(out)
        labels = np.asarray(batch.targets, dtype=np.int64)
        loss = -logp[np.arange(n), labels].mean()
        grad_out = np.exp(logp)
        grad_out[np.arange(n), labels] -= 1.0
        grad_out /= n
    else:
        t = _regression_targets(batch.targets, out.shape[1])
        resid = out - t
        loss = np.mean(resid ** 2)
        grad_out = 2.0 * resid / resid.size

    grads = [None] * len(layers)
    delta = grad_out
    for j in range(len(layers) - 1, -1, -1):
        w, _ = layers[j]
        gw = delta.T @ acts[j]
        gb = delta.sum(axis=0)
        if not (np.isfinite(gw).all() and np.isfinite(gb).all()):
            raise NonFiniteGradientError(j)
        grads[j] = (gw, gb)
        if j > 0:
            delta = (delta @ w) * (acts[j] > 0)
    return float(loss), ParamVector.from_layers(grads)


def sgd_step(spec: ModelSpec, params: ParamVector, batch: Batch, lr: float) -> ParamVector:
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    _, grad = loss_and_gradient(spec, params, batch)
    return params.with_values(params.values - lr * grad.values)


def update_norm(delta: ParamVector | np.ndarray) -> float:
    vals = delta.values if isinstance(delta, ParamVector) else np.asarray(delta, dtype=np.float64)
    return float(np.linalg.norm(vals))


def predict_labels(spec: ModelSpec, params: ParamVector, inputs: np.ndarray) -> np.ndarray:
    return np.argmax(forward(spec, params, inputs), axis=1)


def evaluate(spec: ModelSpec, params: ParamVector, inputs, targets) -> tuple[float, float]:
    """(loss, accuracy) on a held-out set; accuracy is NaN for regression."""
    out = forward(spec, params, inputs)
    loss = compute_loss(out, targets, spec.task)
    if spec.task == "classification":
        acc = float(np.mean(np.argmax(out, axis=1) == np.asarray(targets)))
    else:
        acc = float("nan")
    return loss, acc
