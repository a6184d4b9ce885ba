"""Dense MLP engine: forward pass, manual backprop, and mini-batch SGD.

Everything is float64 numpy. Weight matrices are stored as (out, in) so a
layer computes ``h @ W.T + b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, UsageError

ACTIVATIONS = ("relu", "softplus")


@dataclass
class MLPModel:
    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    hidden_activation: str = "relu"

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        if self.hidden_activation not in ACTIVATIONS:
            raise UsageError(f"unknown activation {self.hidden_activation!r}")
        n = len(self.layer_sizes) - 1
        if n < 1 or len(self.weights) != n or len(self.biases) != n:
            raise DimensionError("need one weight matrix and one bias per layer")
        for l in range(n):
            shape = (self.layer_sizes[l + 1], self.layer_sizes[l])
            if self.weights[l].shape != shape:
                raise DimensionError(f"layer {l}: weight shape {self.weights[l].shape} != {shape}")
            if self.biases[l].shape != (shape[0],):
                raise DimensionError(f"layer {l}: bias shape {self.biases[l].shape} != {(shape[0],)}")

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "MLPModel":
        return MLPModel(
            self.layer_sizes,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.hidden_activation,
        )

    def parameters(self) -> list[np.ndarray]:
        """Weights and biases interleaved per layer: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])

    def same_architecture(self, other: "MLPModel") -> bool:
        return (
            self.layer_sizes == other.layer_sizes
            and self.hidden_activation == other.hidden_activation
        )

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "hidden_activation": self.hidden_activation,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MLPModel":
        return cls(
            tuple(d["layer_sizes"]),
            [np.asarray(w, dtype=np.float64) for w in d["weights"]],
            [np.asarray(b, dtype=np.float64) for b in d["biases"]],
            d.get("hidden_activation", "relu"),
        )


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)
    preacts: list[np.ndarray] = field(default_factory=list)


def init_mlp(layer_sizes, rng: np.random.Generator, hidden_activation: str = "relu") -> MLPModel:
    """Glorot-uniform weights, zero biases."""
    layer_sizes = tuple(int(s) for s in layer_sizes)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MLPModel(layer_sizes, weights, biases, hidden_activation)


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _activate(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    return softplus(z)


def _activation_grad(z, kind):
    if kind == "relu":
        return (z > 0).astype(np.float64)
    return sigmoid(z)


def _check_batch(model: MLPModel, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != model.layer_sizes[0]:
        raise DimensionError(
            f"batch shape {batch.shape} incompatible with input width {model.layer_sizes[0]}"
        )
    return batch


def forward(model: MLPModel, batch: np.ndarray) -> np.ndarray:
    """Logits for ``batch``; the output layer is linear."""
    return forward_cached(model, batch)[0]


def forward_cached(model: MLPModel, batch: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    h = _check_batch(model, batch)
    cache = ForwardCache()
    last = model.num_layers - 1
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        cache.inputs.append(h)
        z = h @ w.T + b
        cache.preacts.append(z)
        h = z if l == last else _activate(z, model.hidden_activation)
    return h, cache


def backward(model: MLPModel, cache: ForwardCache, grad_out: np.ndarray):
    """Backpropagate ``dL/d(output)`` into per-layer weight and bias gradients."""
    grad_w = [None] * model.num_layers
    grad_b = [None] * model.num_layers
    delta = grad_out
    for l in range(model.num_layers - 1, -1, -1):
        if l != model.num_layers - 1:
            delta = delta * _activation_grad(cache.preacts[l], model.hidden_activation)
        grad_w[l] = delta.T @ cache.inputs[l]
        grad_b[l] = delta.sum(axis=0)
        if l > 0:
            delta = delta @ model.weights[l]
    return grad_w, grad_b


def softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _check_labels(labels, n_rows: int, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n_rows,):
        raise DimensionError(f"expected {n_rows} labels, got shape {labels.shape}")
    if n_rows and (labels.min() < 0 or labels.max() >= num_classes):
        raise UsageError(f"labels must lie in [0, {num_classes})")
    return labels.astype(np.int64)


def nll_loss_and_grad(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient with respect to the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    n, k = logits.shape
    labels = _check_labels(labels, n, k)
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return float(loss), grad / n


def _features_labels(data):
    data = getattr(data, "train", data)
    return np.asarray(data.features, dtype=np.float64), np.asarray(data.labels)


def sgd_train(
    model: MLPModel,
    data,
    epochs: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
    prox: tuple[float, MLPModel] | None = None,
) -> MLPModel:
    """Plain mini-batch SGD on mean NLL; returns a new model.

    ``data`` is a Dataset or a ClientShard (its train split is used). With
    ``prox=(mu, anchor)`` every step adds ``mu * (w - anchor)`` to the gradient.
    Batches come from a fresh permutation each epoch; the tail batch is kept.
    """
    x, y = _features_labels(data)
    if len(y) == 0:
        raise UsageError("cannot train on an empty dataset")
    if lr < 0:
        raise UsageError("learning rate must be non-negative")
    if batch_size < 1:
        raise UsageError("batch_size must be positive")
    model = model.copy()
    anchor_params = None
    if prox is not None:
        mu, anchor = prox
        if not anchor.same_architecture(model):
            raise UsageError("prox anchor architecture differs from model")
        anchor_params = anchor.parameters()
    n = len(y)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            logits, cache = forward_cached(model, x[idx])
            _, dlogits = nll_loss_and_grad(logits, y[idx])
            gw, gb = backward(model, cache, dlogits)
            grads = [g for pair in zip(gw, gb) for g in pair]
            params = model.parameters()
            if anchor_params is not None:
                grads = [g + mu * (p - a) for g, p, a in zip(grads, params, anchor_params)]
            for p, g in zip(params, grads):
                p -= lr * g
    if not all(np.isfinite(p).all() for p in model.parameters()):
        raise FloatingPointError("training diverged (non-finite parameters)")
    return model
